mod common;

use common::*;
use dualmax::bellman;
use dualmax::config::ExperimentConfig;
use dualmax::nalgebra::{DMatrix, DVector};
use dualmax::policy::{self, ActionDistribution};
use dualmax::statistics::{self, DataMatrix};
use dualmax::uncertainty;
use dualmax::verify::random_admissible_instance;
use dualmax::{Branch, ConeParams, ProblemData};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(n: usize, seed: u64) -> (ProblemData, ConeParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pd = random_admissible_instance(n, false, &mut rng).unwrap();
    let cone = uncertainty::compute_cone(&pd).unwrap();
    (pd, cone, rng)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn membership_is_symmetric(n in 1usize..=3, seed in any::<u64>(), raw in prop::collection::vec(-3.0f64..3.0, 3)) {
        let (pd, cone, _) = instance(n, seed);
        let b = DVector::from_column_slice(&raw[..n]);
        prop_assert_eq!(uncertainty::member_cone(&pd, &cone, &b), uncertainty::member_cone(&pd, &cone, &(-&b)));
        prop_assert_eq!(uncertainty::member_direct(&pd, &b), uncertainty::member_direct(&pd, &(-&b)));
    }

    #[test]
    fn cone_grows_with_radius(n in 1usize..=3, seed in any::<u64>(), t in 0.0f64..1.0) {
        let (pd, cone, mut rng) = instance(n, seed);
        let b = uncertainty::sample(&pd, &cone, &mut rng).unwrap();
        prop_assert!(uncertainty::member_cone(&pd, &cone, &b));
        let c = 1.0 + t * (pd.beta() / b.norm() - 1.0);
        prop_assert!(uncertainty::member_cone(&pd, &cone, &(&b * c)));
    }

    #[test]
    fn misfit_decomposition(n in 1usize..=3, seed in any::<u64>(), len in 0usize..20) {
        let (pd, cone, mut rng) = instance(n, seed);
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let parts = data.parts(&pd);
        let b = normal_vec(n, &mut rng) * 2.0;
        let (plus, minus) = (statistics::z_b(&pd, &data, &b), statistics::z_b(&pd, &data, &(-&b)));
        prop_assert!(close(parts.z(&b), plus, 1e-10));
        prop_assert!(close(parts.even(b.norm_squared()), 0.5 * (plus + minus), 1e-10));
        prop_assert!(close(parts.z_tilde(&b), 0.5 * (minus - plus), 1e-10));
        prop_assert!(plus >= -1e-9 * (1.0 + data.matrix().trace()));
        prop_assert!(statistics::z_bar(&pd, &data, &cone).unwrap() >= -1e-9 * (1.0 + data.matrix().trace()));
    }

    #[test]
    fn misfit_grows_with_data(n in 1usize..=3, seed in any::<u64>(), len in 0usize..10) {
        let (pd, cone, mut rng) = instance(n, seed);
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let x = normal_vec(n, &mut rng);
        let xn = normal_vec(n, &mut rng);
        let grown = data.updated(&x, 0.7, &xn).unwrap();
        for _ in 0..8 {
            let b = normal_vec(n, &mut rng);
            let before = statistics::z_b(&pd, &data, &b);
            prop_assert!(statistics::z_b(&pd, &grown, &b) >= before - 1e-10 * (1.0 + before.abs()));
        }
    }

    #[test]
    fn value_hat_shrinks_with_data(n in 1usize..=2, seed in any::<u64>(), len in 0usize..10) {
        let (pd, cone, mut rng) = instance(n, seed);
        prop_assume!(uncertainty::min_norm_sq(&pd, &cone).is_ok());
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let grown = data.updated(&normal_vec(n, &mut rng), 0.3, &normal_vec(n, &mut rng)).unwrap();
        let x = normal_vec(n, &mut rng);
        let v0 = bellman::value_hat(&pd, &data, &cone, &x).unwrap();
        let v1 = bellman::value_hat(&pd, &grown, &cone, &x).unwrap();
        prop_assert!(v1 <= v0 + 1e-9 * (1.0 + v0.abs()), "{} > {}", v1, v0);
    }

    #[test]
    fn two_point_reproduces_moments(a in 0.0f64..10.0, frac in -1.0f64..1.0) {
        let m = frac * a;
        let d = ActionDistribution::two_point(m, a);
        let (mean, second) = d.support_moments();
        prop_assert!((mean - m).abs() <= 1e-12 * (1.0 + a));
        prop_assert!((second - a * a).abs() <= 1e-12 * (1.0 + a * a));
        prop_assert!(d.support.iter().all(|&(_, p)| (0.0..=1.0).contains(&p)));
        prop_assert!((d.support.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decisions_mirror_with_state(seed in any::<u64>(), len in 0usize..12, x0 in -5.0f64..5.0) {
        let (pd, cone, mut rng) = instance(1, seed);
        prop_assume!(uncertainty::min_norm_sq(&pd, &cone).is_ok() && x0.abs() > 1e-6);
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let a = policy::decide(&pd, &data, &cone, &s(x0)).unwrap();
        let b = policy::decide(&pd, &data, &cone, &s(-x0)).unwrap();
        prop_assert_eq!(a.branch, b.branch);
        let mut sa: Vec<f64> = a.action.support.iter().map(|&(v, _)| v).collect();
        let mut sb: Vec<f64> = b.action.support.iter().map(|&(v, _)| -v).collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        for (p, q) in sa.iter().zip(&sb) {
            prop_assert!(close(*p, *q, 1e-9), "{:?} vs {:?}", a.action, b.action);
        }
        prop_assert!(close(a.action.mean, -b.action.mean, 1e-9));
    }

    #[test]
    fn decision_invariants(n in 1usize..=2, seed in any::<u64>(), len in 0usize..12, radius in 0.05f64..10.0) {
        let (pd, cone, mut rng) = instance(n, seed);
        prop_assume!(uncertainty::min_norm_sq(&pd, &cone).is_ok());
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let x = normal_vec(n, &mut rng).normalize() * radius;
        let d = policy::decide(&pd, &data, &cone, &x).unwrap();
        prop_assert!(uncertainty::member_cone(&pd, &cone, &d.b_hat));
        prop_assert!(d.ztilde_at_bhat >= 0.0);
        let k = policy::gain_times_x(&pd, &d.b_hat, &x);
        prop_assert!(close(k, d.khat_x, 1e-12));
        match d.branch {
            Branch::Exploit => {
                prop_assert!(d.action.is_deterministic());
                prop_assert!(close(d.action.mean, -k, 1e-12));
            }
            Branch::Explore => {
                prop_assert!(d.action.mean.abs() <= k.abs() * (1.0 + 1e-12));
                prop_assert!(close(d.action.second_moment, k * k, 1e-12));
            }
        }
    }

    #[test]
    fn branch_identities(n in 1usize..=3, seed in any::<u64>(), len in 0usize..12) {
        let (pd, cone, mut rng) = instance(n, seed);
        prop_assume!(uncertainty::min_norm_sq(&pd, &cone).is_ok());
        let data = random_statistic(&pd, &cone, len, 1.0, &mut rng);
        let x = normal_vec(n, &mut rng);
        let d = policy::decide(&pd, &data, &cone, &x).unwrap();
        let plus = bellman::f_u_vb(&pd, &data, &x, &d.action, &d.b_hat);
        let minus = bellman::f_u_vb(&pd, &data, &x, &d.action, &(-&d.b_hat));
        match d.branch {
            Branch::Explore => prop_assert!(close(plus, minus, 1e-10)),
            Branch::Exploit => {
                let shift = 4.0 * d.khat_x * d.b_hat_ax / pd.gain_factor() - 2.0 * d.ztilde_at_bhat;
                prop_assert!(close(minus, plus + shift, 1e-10));
            }
        }
    }

    #[test]
    fn tau_is_monotone(a in 0.0f64..3.0, da in 0.0f64..1.0, g in 1.01f64..20.0, dg in 0.0f64..5.0) {
        let tau = |a: f64, g: f64| ProblemData::scalar(a, 0.5, 1.0, 2.0, g).unwrap().tau();
        prop_assert!(tau(a + da, g) >= tau(a, g));
        prop_assert!(tau(a, g + dg) <= tau(a, g));
    }

    #[test]
    fn admissibility_implies_proof_conditions(n in 1usize..=3, seed in any::<u64>()) {
        let (pd, _, _) = instance(n, seed);
        prop_assert!(pd.validate_gamma());
        let q = pd.gamma_sq();
        prop_assert!(q / pd.tau() >= (1.0 + 2.0 * pd.r() + pd.beta() * pd.beta()) * (1.0 - 1e-12));
        let m: DMatrix<f64> = pd.s() * q - DMatrix::identity(n, n) * pd.tau();
        let min_eig = m.symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-9 * q);
    }

    #[test]
    fn config_round_trip(
        a in -2.0f64..2.0, s in 0.1f64..2.0, r in 0.0f64..3.0, beta in 1.0f64..4.0,
        gamma in 1.1f64..50.0, seed in any::<u64>(), horizon in 1usize..500, rollouts in 1usize..5000,
        sigma in 0.01f64..5.0,
    ) {
        let text = format!(
            r#"{{"problem": {{"n": 1, "a": [{a}], "s": [{s}], "r": {r}, "beta": {beta}, "gamma": {gamma}}},
                "run": {{"simulate": {{"b_true": [1.5], "horizon": {horizon}, "rollouts": {rollouts},
                          "disturbance": {{"kind": "gaussian", "sigma": {sigma}}}}}, "verify": {{}}}},
                "seed": {seed}, "output": {{"path": "x", "format": "csv"}}}}"#
        );
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.to_json(), again.to_json());
        prop_assert_eq!(cfg.content_hash(), again.content_hash());
    }
}

#[test]
fn data_serde_round_trip() {
    let (pd, cone) = p1();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: DataMatrix = random_statistic(&pd, &cone, 5, 1.0, &mut rng);
    let text = serde_json::to_string(&data).unwrap();
    let back: DataMatrix = serde_json::from_str(&text).unwrap();
    assert_eq!(back.count(), data.count());
    assert_eq!(back.matrix(), data.matrix());
}
