//! Command-line front end.
//!
//! Exit codes: 0 when every checked claim holds, 1 when a claim fails or the
//! instance is not admissible, 2 on usage or input errors.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, OutputFormat, VerifyBlock};
use crate::error::{DualError, Result};
use crate::policy::Policy;
use crate::problem::{Admissibility, ProblemData};
use crate::simulator::{self, GainReport, RolloutRecord};
use crate::uncertainty::{self, SetKind};
use crate::verify::{self, BellmanSuiteReport, MembershipReport, TelescopingSuiteReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CLAIM_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "DUALMAX_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dualmax", version, about = "Minimax dual control for linear systems with unknown input gain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the gain condition and classify the admissible input set.
    Validate(CommonArgs),
    /// Run closed-loop rollouts and estimate the cost-to-disturbance ratio.
    Simulate(CommonArgs),
    /// Run the Bellman, membership and telescoping suites.
    Verify(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_parser = ["jsonl", "csv"])]
    pub format: Option<String>,
}

/// Result of a subcommand: the exit code and the lines printed to stdout.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: i32,
    pub lines: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, lines: Vec<String>) -> Self {
        Outcome { code: if pass { EXIT_PASS } else { EXIT_CLAIM_FAILURE }, lines }
    }
}

pub fn exit_code(err: &DualError) -> i32 {
    match err {
        DualError::Config(_) | DualError::InvalidInstance(_) => EXIT_USAGE,
        _ => EXIT_CLAIM_FAILURE,
    }
}

/// Parses `args`, runs the command and returns the exit code. Diagnostics go
/// to stderr, reports to stdout.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            outcome.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    apply_thread_cap()?;
    match &cli.command {
        Command::Validate(args) => cmd_validate(&load(args)?),
        Command::Simulate(args) => {
            let cfg = load(args)?;
            let out = out_dir(args, &cfg);
            cmd_simulate(&cfg, &out)
        }
        Command::Verify(args) => {
            let cfg = load(args)?;
            let out = out_dir(args, &cfg);
            cmd_verify(&cfg, &out)
        }
    }
}

fn apply_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| DualError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if threads == 0 {
        return Err(DualError::Config(format!("{THREADS_ENV} must be positive")));
    }
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Loads the config and applies command-line overrides.
pub fn load(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.path = out.to_string_lossy().into_owned();
    }
    if let Some(format) = &args.format {
        cfg.output.format = format.parse()?;
    }
    if let Some(sim) = cfg.run.simulate.as_mut() {
        if let Some(r) = args.rollouts {
            sim.rollouts = r;
        }
        if let Some(h) = args.horizon {
            sim.horizon = h;
        }
    }
    if let Some(ver) = cfg.run.verify.as_mut() {
        if let Some(r) = args.rollouts {
            ver.telescoping_rollouts = r;
        }
        if let Some(h) = args.horizon {
            ver.telescoping_horizon = h;
        }
    }
    Ok(cfg)
}

fn out_dir(args: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.path))
}

fn kind_name(kind: SetKind) -> &'static str {
    match kind {
        SetKind::Empty => "empty",
        SetKind::All => "all",
        SetKind::Cone => "cone",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub seed: u64,
    pub config_hash: String,
    pub admissibility: Admissibility,
    pub tau: f64,
    pub kind: SetKind,
    pub lambda: Vec<f64>,
    /// `None` when the admissible set is empty.
    pub min_norm_sq: Option<f64>,
    pub beta_sq: f64,
    pub pass: bool,
}

pub fn validate_report(cfg: &ExperimentConfig) -> Result<(ProblemData, uncertainty::ConeParams, ValidateReport)> {
    let pd = cfg.problem.build()?;
    let adm = pd.admissibility()?;
    let cone = uncertainty::compute_cone(&pd)?;
    let min_norm = uncertainty::min_norm_sq(&pd, &cone).ok();
    let report = ValidateReport {
        seed: cfg.seed,
        config_hash: cfg.content_hash(),
        pass: adm.admissible && min_norm.is_some(),
        admissibility: adm,
        tau: pd.tau(),
        kind: cone.kind,
        lambda: cone.lambda.clone(),
        min_norm_sq: min_norm,
        beta_sq: pd.beta() * pd.beta(),
    };
    Ok((pd, cone, report))
}

pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (_, _, rep) = validate_report(cfg)?;
    let adm = &rep.admissibility;
    let mut lines = vec![
        format!("seed: {}", rep.seed),
        format!("config_hash: {}", rep.config_hash),
        format!("gamma^2 = {:.6}, threshold = {:.6}, admissible: {}", adm.gamma_sq, adm.threshold, adm.admissible),
        format!("tau = {:.6}", rep.tau),
        format!("set kind: {}", kind_name(rep.kind)),
    ];
    lines.push(match rep.min_norm_sq {
        Some(m) => format!("min |B|^2 = {:.6} (beta^2 = {:.6}), feasible: true", m, rep.beta_sq),
        None => format!("min |B|^2 exceeds beta^2 = {:.6}, feasible: false", rep.beta_sq),
    });
    lines.push(format!("result: {}", if rep.pass { "PASS" } else { "FAIL" }));
    Ok(Outcome::new(rep.pass, lines))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub seed: u64,
    pub config_hash: String,
    pub b_true: Vec<f64>,
    pub horizon: usize,
    #[serde(flatten)]
    pub report: GainReport,
}

/// One line of the per-step output.
#[derive(Serialize)]
struct StepLine<'a> {
    seed: u64,
    config_hash: &'a str,
    rollout: u64,
    #[serde(flatten)]
    step: &'a simulator::StepRecord,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let pd = cfg.problem.build()?;
    let rc = cfg.rollout_config()?;
    if rc.rollouts == 0 {
        return Err(DualError::Config("rollouts must be positive".into()));
    }
    if rc.horizon == 0 {
        return Err(DualError::Config("horizon must be positive".into()));
    }
    pd.require_admissible()?;
    let cone = uncertainty::compute_cone(&pd)?;
    let hash = cfg.content_hash();
    info!("simulating {} rollouts of length {}", rc.rollouts, rc.horizon);
    let (records, report) = simulator::simulate(&pd, &cone, &rc, None)?;

    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let steps_path = match cfg.output.format {
        OutputFormat::Jsonl => {
            let p = out.join("rollouts.jsonl");
            write_jsonl(&p, cfg.seed, &hash, &records)?;
            p
        }
        OutputFormat::Csv => {
            let p = out.join("rollouts.csv");
            write_csv(&p, cfg.seed, &hash, pd.n(), &records)?;
            p
        }
    };
    let summary = SimulateSummary {
        seed: cfg.seed,
        config_hash: hash.clone(),
        b_true: rc.b_true.clone(),
        horizon: rc.horizon,
        report: report.clone(),
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;

    let lines = vec![
        format!("seed: {}", cfg.seed),
        format!("config_hash: {hash}"),
        format!("rollouts: {}, horizon: {}", report.rollouts, rc.horizon),
        format!(
            "mean ratio = {:.6}, 99% upper bound = {:.6}, gamma^2 = {:.6}",
            report.mean_ratio, report.upper_confidence, report.gamma_sq
        ),
        format!("explore fraction = {:.4}", report.explore_fraction),
        format!("steps: {}", steps_path.display()),
        format!("summary: {}", summary_path.display()),
        format!("result: {}", if report.pass { "PASS" } else { "FAIL" }),
    ];
    Ok(Outcome::new(report.pass, lines))
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutput {
    pub seed: u64,
    pub config_hash: String,
    pub kind: SetKind,
    pub tolerance: f64,
    pub bellman: Option<BellmanSuiteReport>,
    pub membership: MembershipReport,
    pub telescoping: Option<TelescopingSuiteReport>,
    pub pass: bool,
}

pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let pd = cfg.problem.build()?;
    let settings = cfg.run.verify.clone().unwrap_or_default();
    check_counts(&settings)?;
    pd.require_admissible()?;
    let cone = uncertainty::compute_cone(&pd)?;
    let hash = cfg.content_hash();

    info!("membership suite: {} samples", settings.membership_samples);
    let membership =
        verify::membership_suite(&pd, &cone, settings.membership_samples, cfg.seed, settings.membership_band)?;

    let (bellman, telescoping) = if uncertainty::min_norm_sq(&pd, &cone).is_ok() {
        let policy = Policy::new(&pd, &cone)?;
        info!("bellman suite: {} samples", settings.bellman_samples);
        let bellman = verify::bellman_suite(&policy, settings.bellman_samples, cfg.seed, settings.tolerance)?;
        let b_true = match &settings.b_true {
            Some(b) => b.clone(),
            None => {
                let mut rng = simulator::stream_rng(cfg.seed, u64::MAX - 2);
                uncertainty::sample(&pd, &cone, &mut rng)?.iter().copied().collect()
            }
        };
        info!("telescoping suite: {} rollouts", settings.telescoping_rollouts);
        let tele = verify::telescoping_suite(
            &policy,
            &b_true,
            settings.telescoping_rollouts,
            settings.telescoping_horizon,
            cfg.seed,
            settings.telescoping_tolerance,
        )?;
        (Some(bellman), Some(tele))
    } else {
        (None, None)
    };

    let pass =
        membership.pass && bellman.as_ref().is_some_and(|b| b.pass) && telescoping.as_ref().is_some_and(|t| t.pass);
    let output = VerifyOutput {
        seed: cfg.seed,
        config_hash: hash.clone(),
        kind: cone.kind,
        tolerance: settings.tolerance,
        bellman,
        membership,
        telescoping,
        pass,
    };
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let path = out.join("verify.json");
    write_json(&path, &output)?;

    let mut lines = vec![format!("seed: {}", cfg.seed), format!("config_hash: {hash}")];
    match &output.bellman {
        Some(b) => lines.push(format!(
            "bellman: {} samples, {} failures, worst relative margin {:.3e}",
            b.samples, b.failures, b.worst_relative_margin
        )),
        None => lines.push("bellman: skipped, admissible set is empty".into()),
    }
    let m = &output.membership;
    lines.push(format!(
        "membership: {} compared, {} skipped in band, {} disagreements",
        m.compared, m.skipped_in_band, m.disagreements
    ));
    if let Some(t) = &output.telescoping {
        lines.push(format!(
            "telescoping: {} steps, {} violations, worst energy gap {:.3e}",
            t.steps, t.violations, t.worst_energy_gap
        ));
    }
    lines.push(format!("report: {}", path.display()));
    lines.push(format!("result: {}", if pass { "PASS" } else { "FAIL" }));
    Ok(Outcome::new(pass, lines))
}

fn check_counts(v: &VerifyBlock) -> Result<()> {
    for (name, count) in [
        ("bellman_samples", v.bellman_samples),
        ("membership_samples", v.membership_samples),
        ("telescoping_rollouts", v.telescoping_rollouts),
        ("telescoping_horizon", v.telescoping_horizon),
    ] {
        if count == 0 {
            return Err(DualError::Config(format!("{name} must be positive")));
        }
    }
    if let Some(b) = &v.b_true {
        if b.iter().any(|x| !x.is_finite()) {
            return Err(DualError::Config("verify.b_true must be finite".into()));
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> DualError {
    DualError::Config(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DualError::Numeric(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn write_jsonl(path: &Path, seed: u64, hash: &str, records: &[RolloutRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        for step in &rec.steps {
            let line = StepLine { seed, config_hash: hash, rollout: rec.index, step };
            serde_json::to_writer(&mut w, &line).map_err(|e| DualError::Numeric(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| io_error(path, e))?;
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn write_csv(path: &Path, seed: u64, hash: &str, n: usize, records: &[RolloutRecord]) -> Result<()> {
    let csv_err = |e: csv::Error| DualError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["seed", "config_hash", "rollout", "t"].iter().map(|s| s.to_string()).collect();
    header.extend((0..n).map(|i| format!("x{i}")));
    header.push("branch".into());
    header.extend((0..n).map(|i| format!("b_hat{i}")));
    header.extend(["khat_x", "action_mean", "action_second_moment", "u"].iter().map(|s| s.to_string()));
    header.extend((0..n).map(|i| format!("w{i}")));
    header.push("stage_cost".into());
    w.write_record(&header).map_err(csv_err)?;
    for rec in records {
        for s in &rec.steps {
            let mut row = vec![seed.to_string(), hash.to_string(), rec.index.to_string(), s.t.to_string()];
            row.extend(s.x.iter().map(f64::to_string));
            row.push(format!("{:?}", s.branch).to_lowercase());
            row.extend(s.b_hat.iter().map(f64::to_string));
            row.push(s.khat_x.to_string());
            row.push(s.action.mean.to_string());
            row.push(s.action.second_moment.to_string());
            row.push(s.u.to_string());
            row.extend(s.w.iter().map(f64::to_string));
            row.push(s.stage_cost.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}
