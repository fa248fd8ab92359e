use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const P1: &str = r#"{
  "problem": {"n": 1, "a": [1.0], "s": [0.5], "r": 1.0, "beta": 2.0, "gamma": 5.0},
  "run": {
    "simulate": {"b_true": [1.5], "horizon": 100, "rollouts": 2000,
                 "disturbance": {"kind": "gaussian", "sigma": 1.0}},
    "verify": {"bellman_samples": 10000, "membership_samples": 20000}
  },
  "seed": 11
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmax"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("DUALMAX_THREADS", "2")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_reports_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p1.json", P1);
    let o = run(&["validate"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("threshold = 21.583333"), "{text}");
    assert!(text.contains("set kind: cone"));
    assert!(text.contains("min |B|^2 = 1.040000"));
    assert!(text.contains("seed: 11"));
    assert!(text.contains("config_hash: "));
}

#[test]
fn validate_rejects_small_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g2.json", &P1.replace(r#""gamma": 5.0"#, r#""gamma": 2.0"#));
    let o = run(&["validate"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("admissible: false"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nog.json", &P1.replace(r#", "gamma": 5.0"#, ""));
    let o = run(&["validate"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));

    let good = write_config(dir.path(), "p1.json", P1);
    let o = run(&["simulate", "--rollouts", "0"], &good, dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["validate"], &dir.path().join("missing.json"), dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_dualmax")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p1.json", P1);
    let out = dir.path().join("run");
    let o = run(&["simulate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["gamma_sq"], 25.0);
    assert!(summary["mean_ratio"].as_f64().unwrap() < 25.0);
    assert_eq!(summary["seed"], 11);
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    let steps = std::fs::read_to_string(out.join("rollouts.jsonl")).unwrap();
    let lines: Vec<&str> = steps.lines().collect();
    assert_eq!(lines.len(), 2000 * 100);
    let first: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["config_hash"], hash.as_str());
    assert_eq!(first["t"], 0);
    assert!(first["action"]["support"].is_array());
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p1.json", P1);
    let read = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let o = run(&["simulate", "--rollouts", "20", "--horizon", "30", "--seed", seed], &cfg, &out);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(out.join("rollouts.jsonl")).unwrap()
    };
    let a = read("a", "5");
    assert_eq!(a, read("b", "5"));
    assert_ne!(a, read("c", "6"));
}

#[test]
fn simulate_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p1.json", P1);
    let out = dir.path().join("csv");
    let o = run(&["simulate", "--rollouts", "3", "--horizon", "7", "--format", "csv"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    let mut reader = csv::Reader::from_path(out.join("rollouts.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "seed");
    assert!(headers.iter().any(|h| h == "stage_cost"));
    assert_eq!(reader.records().count(), 21);
}

#[test]
fn simulate_rejects_inadmissible_b() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b1.json", &P1.replace(r#""b_true": [1.5]"#, r#""b_true": [1.0]"#));
    let o = run(&["simulate"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not in the admissible set"));
}

#[test]
fn verify_p1_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p1.json", P1);
    let o = run(&["verify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["bellman"]["samples"], 10000);
    assert_eq!(report["bellman"]["failures"], 0);
    assert!(report["bellman"]["worst_relative_margin"].as_f64().unwrap() >= -1e-7);
    assert_eq!(report["membership"]["disagreements"], 0);
    assert_eq!(report["telescoping"]["violations"], 0);
    assert_eq!(report["seed"], 11);
}

#[test]
fn verify_negative_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let text = P1.replace(r#""membership_samples": 20000"#, r#""membership_samples": 1000, "tolerance": -1.0"#);
    let cfg = write_config(dir.path(), "tol.json", &text);
    let o = run(&["verify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("result: FAIL"));
}

#[test]
fn shipped_configs_are_admissible() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        seen += 1;
        let cfg = dualmax::config::ExperimentConfig::load(&path).unwrap();
        let pd = cfg.problem.build().unwrap();
        assert!(pd.validate_gamma(), "{}", path.display());
        let cone = dualmax::uncertainty::compute_cone(&pd).unwrap();
        let b = dualmax::nalgebra::DVector::from_vec(cfg.run.simulate.unwrap().b_true);
        assert!(dualmax::uncertainty::member_cone(&pd, &cone, &b), "{}", path.display());
        assert!(dualmax::uncertainty::member_direct(&pd, &b), "{}", path.display());
    }
    assert!(seen >= 2);
}
