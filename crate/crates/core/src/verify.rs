//! Batch verification suites shared by the CLI and the acceptance tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bellman::{self, BellmanReport};
use crate::error::{DualError, Result};
use crate::policy::{Controller, Policy};
use crate::problem::ProblemData;
use crate::simulator::{self, Disturbance, RolloutConfig, TelescopingMode};
use crate::uncertainty::{self, ConeParams, SetKind};

const MAX_REPORTED_FAILURES: usize = 20;
const MAX_EPISODE_LEN: usize = 40;

/// Smallest `gamma` with `gamma^2 >= (1 + 2|A|^2/(1 - gamma^-2)) m`.
///
/// With `q = gamma^2` the condition is `q^2 - q (1 + m + 2|A|^2 m) + m >= 0`.
pub fn minimal_gamma(a_norm: f64, m: f64) -> f64 {
    let b = 1.0 + m + 2.0 * a_norm * a_norm * m;
    ((b + (b * b - 4.0 * m).max(0.0).sqrt()) / 2.0).sqrt()
}

/// Draws a random instance that satisfies the gain-level condition and whose
/// admissible set is nonempty; with `require_cone` the set is of `Cone` kind.
pub fn random_admissible_instance<R: Rng + ?Sized>(n: usize, require_cone: bool, rng: &mut R) -> Result<ProblemData> {
    for _ in 0..10_000 {
        let a = DMatrix::from_fn(n, n, |_, _| {
            0.6 * {
                let v: f64 = StandardNormal.sample(rng);
                v
            }
        });
        let q = random_orthogonal(n, rng);
        let diag = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.3..0.95)));
        let s = crate::linalg::symmetrize(&(&q * diag * q.transpose()));
        let r: f64 = rng.random_range(0.2..1.0);
        let beta: f64 = rng.random_range(1.5..2.5);
        let a_norm = crate::linalg::spectral_norm(&a)?;
        let s_min = crate::linalg::min_eigenvalue(&s)?;
        let m = (1.0 + 2.0 * r + beta * beta).max(1.0 / s_min);
        let gamma = minimal_gamma(a_norm, m) * rng.random_range(1.0001..1.2);
        let pd = ProblemData::new(a, s, r, beta, gamma)?;
        if !pd.validate_gamma() {
            continue;
        }
        let cone = uncertainty::compute_cone(&pd)?;
        if uncertainty::min_norm_sq(&pd, &cone).is_err() {
            continue;
        }
        if require_cone && cone.kind != SetKind::Cone {
            continue;
        }
        return Ok(pd);
    }
    Err(DualError::Numeric(format!("no admissible instance found for n = {n}")))
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    g.qr().q()
}

#[derive(Debug, Clone, Serialize)]
pub struct BellmanSuiteReport {
    pub samples: usize,
    pub failures: usize,
    pub explore_samples: usize,
    /// Smallest `margin / (1 + |V_hat|)`.
    pub worst_relative_margin: f64,
    pub failing: Vec<BellmanReport>,
    pub pass: bool,
}

/// Checks the Bellman inequality at `samples` points `(x, Z)`. Statistics come
/// from closed-loop episodes with random admissible `B` and Gaussian noise;
/// states are drawn on spheres of radius 0.1, 1 and 10.
pub fn bellman_suite(policy: &Policy, samples: usize, seed: u64, coef: f64) -> Result<BellmanSuiteReport> {
    let mut plan_rng = simulator::stream_rng(seed, u64::MAX - 1);
    let mut episodes = Vec::new();
    let mut planned = 0;
    while planned < samples {
        let len = plan_rng.random_range(1..=MAX_EPISODE_LEN).min(samples - planned);
        episodes.push((episodes.len() as u64, len));
        planned += len;
    }
    let reports: Vec<Vec<BellmanReport>> =
        episodes.par_iter().map(|&(k, len)| bellman_episode(policy, seed, k, len, coef)).collect::<Result<_>>()?;
    let reports: Vec<BellmanReport> = reports.into_iter().flatten().collect();
    let failing: Vec<BellmanReport> = reports.iter().filter(|r| !r.pass).cloned().collect();
    let worst = reports.iter().map(|r| r.margin / (1.0 + r.value_hat.abs())).fold(f64::INFINITY, f64::min);
    Ok(BellmanSuiteReport {
        samples: reports.len(),
        failures: failing.len(),
        explore_samples: reports.iter().filter(|r| r.branch == crate::Branch::Explore).count(),
        worst_relative_margin: worst,
        pass: failing.is_empty(),
        failing: failing.into_iter().take(MAX_REPORTED_FAILURES).collect(),
    })
}

fn bellman_episode(policy: &Policy, seed: u64, index: u64, len: usize, coef: f64) -> Result<Vec<BellmanReport>> {
    let pd = policy.problem();
    let n = pd.n();
    let mut rng = simulator::stream_rng(seed, index);
    let b_true = uncertainty::sample(pd, policy.cone(), &mut rng)?;
    let sigma = [0.1, 1.0, 3.0][rng.random_range(0..3)];
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut ctrl = Controller::new(policy.clone());
    let mut state = DVector::zeros(n);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let radius = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let probe = random_unit(n, &mut rng) * radius;
        out.push(bellman::check_bellman_with(policy, ctrl.data(), &probe, coef)?);

        let decision = ctrl.decide(&state)?;
        let u = decision.action.realize(&mut rng);
        let w = DVector::from_fn(n, |_, _| noise.sample(&mut rng));
        let next = simulator::step(pd, &b_true, &state, u, &w);
        ctrl.observe(&state, u, &next)?;
        state = next;
    }
    Ok(out)
}

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            v
        });
        let norm: f64 = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MembershipReport {
    pub kind: SetKind,
    pub samples: usize,
    pub compared: usize,
    pub skipped_in_band: usize,
    pub members_direct: usize,
    pub members_cone: usize,
    pub disagreements: usize,
    /// Up to 20 disagreeing points.
    pub examples: Vec<Vec<f64>>,
    pub pass: bool,
}

/// Compares the direct matrix-inequality test with the eigen (cone) test on
/// random `B`. Half the points are drawn from the cone form itself, half
/// uniformly from the ball of radius `1.2 beta`. Points within `band` of any
/// boundary are skipped.
pub fn membership_suite(
    pd: &ProblemData,
    cone: &ConeParams,
    samples: usize,
    seed: u64,
    band: f64,
) -> Result<MembershipReport> {
    let mut rng = simulator::stream_rng(seed, 0);
    let n = pd.n();
    let nonempty = uncertainty::min_norm_sq(pd, cone).is_ok();
    let (mut compared, mut skipped, mut md, mut mc, mut dis) = (0, 0, 0, 0, 0);
    let mut examples = Vec::new();
    for k in 0..samples {
        let b = if nonempty && k % 2 == 0 {
            uncertainty::sample(pd, cone, &mut rng)?
        } else {
            let r = 1.2 * pd.beta() * rng.random::<f64>().powf(1.0 / n as f64);
            random_unit(n, &mut rng) * r
        };
        let norm = b.norm();
        let direct_margin = uncertainty::direct_margin(pd, &b)?;
        let near = (norm - 1.0).abs() <= band
            || (norm - pd.beta()).abs() <= band
            || direct_margin.abs() <= band
            || uncertainty::cone_margin(pd, cone, &b).is_some_and(|m| m.abs() <= band);
        if near {
            skipped += 1;
            continue;
        }
        compared += 1;
        let d = uncertainty::member_direct(pd, &b);
        let c = uncertainty::member_cone(pd, cone, &b);
        md += d as usize;
        mc += c as usize;
        if d != c {
            dis += 1;
            if examples.len() < MAX_REPORTED_FAILURES {
                examples.push(b.iter().copied().collect());
            }
        }
    }
    Ok(MembershipReport {
        kind: cone.kind,
        samples,
        compared,
        skipped_in_band: skipped,
        members_direct: md,
        members_cone: mc,
        disagreements: dis,
        examples,
        pass: dis == 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TelescopingSuiteReport {
    pub rollouts: usize,
    pub steps: usize,
    pub violations: usize,
    pub inconsistent_records: usize,
    pub worst_relative_margin: f64,
    /// Largest relative gap of `z_{B_true}(Z_T) = gamma^2 sum |w|^2`.
    pub worst_energy_gap: f64,
    pub energy_tolerance: f64,
    pub pass: bool,
}

/// Telescoping inequality and the disturbance-energy identity along seeded
/// rollouts with Gaussian noise.
pub fn telescoping_suite(
    policy: &Policy,
    b_true: &[f64],
    rollouts: usize,
    horizon: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<TelescopingSuiteReport> {
    let pd = policy.problem();
    let cone = policy.cone();
    let cfg = RolloutConfig {
        b_true: b_true.to_vec(),
        horizon,
        disturbance: Disturbance::Gaussian { sigma: 1.0 },
        rollouts,
        seed,
        x0: None,
    };
    cfg.validate(pd, cone)?;
    let results: Vec<(simulator::TelescopingReport, f64)> = (0..rollouts as u64)
        .into_par_iter()
        .map(|k| {
            let rec = simulator::rollout_indexed(policy, &cfg, k)?;
            let tele = simulator::telescoping_check(pd, cone, &rec, TelescopingMode::Exact, rel_tol)?;
            let gap = simulator::energy_identity_gap(pd, &rec)?;
            Ok((tele, gap))
        })
        .collect::<Result<_>>()?;
    let violations = results.iter().map(|(t, _)| t.violations).sum();
    let inconsistent = results.iter().filter(|(t, _)| !t.consistent).count();
    let worst_gap = results.iter().map(|(_, g)| *g).fold(0.0, f64::max);
    let energy_tolerance = 1e-8;
    Ok(TelescopingSuiteReport {
        rollouts,
        steps: results.iter().map(|(t, _)| t.steps).sum(),
        violations,
        inconsistent_records: inconsistent,
        worst_relative_margin: results.iter().map(|(t, _)| t.worst_margin).fold(f64::INFINITY, f64::min),
        worst_energy_gap: worst_gap,
        energy_tolerance,
        pass: violations == 0 && inconsistent == 0 && worst_gap <= energy_tolerance,
    })
}
