//! Closed-loop rollouts of `x+ = Ax + Bu + w` under the dual policy.
//!
//! Every rollout owns two random streams derived from the master seed by
//! stream index (`2k` for the policy, `2k + 1` for the disturbance), so runs are
//! reproducible regardless of how rollouts are scheduled across threads.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman;
use crate::error::{DualError, Result};
use crate::policy::{ActionDistribution, Branch, Controller, Policy};
use crate::problem::ProblemData;
use crate::statistics::{self, DataMatrix};
use crate::uncertainty::{self, ConeParams};

/// One-sided standard normal quantile at 0.99.
pub const Z_99: f64 = 2.326_347_874_040_841;
pub const GAIN_SLACK: f64 = 1e-3;

/// Disturbance strategy. Deterministic strategies yield the same sequence in
/// every rollout; `Gaussian` draws a fresh sequence per rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    Zero,
    Gaussian {
        sigma: f64,
    },
    Sinusoid {
        amplitude: f64,
        frequency: f64,
    },
    Constant {
        value: Vec<f64>,
    },
    /// Explicit sequence; steps past its end are zero.
    Sequence {
        values: Vec<Vec<f64>>,
    },
    /// Hill climbing over fixed-energy sequences to maximize the cost ratio.
    Adversarial {
        rounds: usize,
        #[serde(default = "default_probes")]
        probes: usize,
    },
}

fn default_probes() -> usize {
    8
}

impl Disturbance {
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Disturbance::Gaussian { .. })
    }

    /// Disturbance at step `t`. `x` is the current state, available to
    /// history-dependent strategies.
    pub fn sample<R: Rng + ?Sized>(&self, t: usize, n: usize, _x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        Ok(match self {
            Disturbance::Zero => DVector::zeros(n),
            Disturbance::Gaussian { sigma } => {
                let normal = Normal::new(0.0, *sigma).map_err(|e| DualError::Config(e.to_string()))?;
                DVector::from_fn(n, |_, _| normal.sample(rng))
            }
            Disturbance::Sinusoid { amplitude, frequency } => DVector::from_fn(n, |i, _| {
                amplitude * (2.0 * std::f64::consts::PI * frequency * t as f64 + i as f64).sin()
            }),
            Disturbance::Constant { value } => {
                check_len(value.len(), n)?;
                DVector::from_column_slice(value)
            }
            Disturbance::Sequence { values } => match values.get(t) {
                Some(w) => {
                    check_len(w.len(), n)?;
                    DVector::from_column_slice(w)
                }
                None => DVector::zeros(n),
            },
            Disturbance::Adversarial { .. } => {
                return Err(DualError::Config("adversarial strategy must be resolved before sampling".into()))
            }
        })
    }
}

fn check_len(len: usize, n: usize) -> Result<()> {
    if len == n {
        Ok(())
    } else {
        Err(DualError::Config(format!("disturbance has dimension {len}, state has {n}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub b_true: Vec<f64>,
    pub horizon: usize,
    pub disturbance: Disturbance,
    pub rollouts: usize,
    pub seed: u64,
    /// Initial state override; `None` means `x0 = 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl RolloutConfig {
    pub fn validate(&self, pd: &ProblemData, cone: &ConeParams) -> Result<()> {
        uncertainty::min_norm_sq(pd, cone)?;
        if self.b_true.len() != pd.n() {
            return Err(DualError::Config(format!("b_true has {} entries, n = {}", self.b_true.len(), pd.n())));
        }
        if self.horizon == 0 {
            return Err(DualError::Config("horizon must be positive".into()));
        }
        if self.rollouts == 0 {
            return Err(DualError::Config("rollouts must be positive".into()));
        }
        if let Some(x0) = &self.x0 {
            check_len(x0.len(), pd.n())?;
        }
        let b = DVector::from_column_slice(&self.b_true);
        if !uncertainty::member_cone(pd, cone, &b) {
            return Err(DualError::NotAdmissible(format!(
                "b_true = {:?} (|b| = {:.6}, admissible |b|^2 >= {:.6})",
                self.b_true,
                b.norm(),
                uncertainty::min_norm_sq(pd, cone)?
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub branch: Branch,
    pub b_hat: Vec<f64>,
    pub khat_x: f64,
    pub action: ActionDistribution,
    pub u: f64,
    pub w: Vec<f64>,
    pub stage_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: u64,
    pub seed: u64,
    pub b_true: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub terminal_state: Vec<f64>,
    pub cumulative_cost: f64,
    pub disturbance_energy: f64,
    /// `cumulative_cost / disturbance_energy`, absent when the energy is zero.
    pub ratio: Option<f64>,
}

impl RolloutRecord {
    /// Fraction of explore steps with `t` in `[from, horizon)`.
    pub fn explore_fraction(&self, from: usize) -> f64 {
        let tail: Vec<_> = self.steps.iter().filter(|s| s.t >= from).collect();
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|s| s.branch == Branch::Explore).count() as f64 / tail.len() as f64
    }

    /// The statistic after all recorded transitions.
    pub fn final_statistic(&self) -> Result<DataMatrix> {
        let n = self.terminal_state.len();
        let mut data = DataMatrix::new(n);
        for (k, step) in self.steps.iter().enumerate() {
            let next = self.steps.get(k + 1).map(|s| &s.x).unwrap_or(&self.terminal_state);
            data.update(&DVector::from_column_slice(&step.x), step.u, &DVector::from_column_slice(next))?;
        }
        Ok(data)
    }
}

/// `Ax + Bu + w`.
pub fn step(pd: &ProblemData, b_true: &DVector<f64>, x: &DVector<f64>, u: f64, w: &DVector<f64>) -> DVector<f64> {
    pd.a() * x + b_true * u + w
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates rollout number `index` of `cfg`.
pub fn rollout_indexed(policy: &Policy, cfg: &RolloutConfig, index: u64) -> Result<RolloutRecord> {
    let pd = policy.problem();
    cfg.validate(pd, policy.cone())?;
    let n = pd.n();
    let b_true = DVector::from_column_slice(&cfg.b_true);
    let mut policy_rng = stream_rng(cfg.seed, 2 * index);
    let mut dist_rng = stream_rng(cfg.seed, 2 * index + 1);
    let mut ctrl = Controller::new(policy.clone());
    let mut x = cfg.x0.as_ref().map(|v| DVector::from_column_slice(v)).unwrap_or_else(|| DVector::zeros(n));
    let mut steps = Vec::with_capacity(cfg.horizon);
    let (mut cost, mut energy) = (0.0, 0.0);
    for t in 0..cfg.horizon {
        let decision = ctrl.decide(&x)?;
        let u = decision.action.realize(&mut policy_rng);
        let w = cfg.disturbance.sample(t, n, &x, &mut dist_rng)?;
        let stage_cost = pd.state_cost(&x) + pd.r() * u * u;
        let next = step(pd, &b_true, &x, u, &w);
        ctrl.observe(&x, u, &next)?;
        cost += stage_cost;
        energy += w.norm_squared();
        steps.push(StepRecord {
            t,
            x: x.iter().copied().collect(),
            branch: decision.branch,
            b_hat: decision.b_hat.iter().copied().collect(),
            khat_x: decision.khat_x,
            action: decision.action,
            u,
            w: w.iter().copied().collect(),
            stage_cost,
        });
        x = next;
    }
    Ok(RolloutRecord {
        index,
        seed: cfg.seed,
        b_true: cfg.b_true.clone(),
        steps,
        terminal_state: x.iter().copied().collect(),
        cumulative_cost: cost,
        disturbance_energy: energy,
        ratio: (energy > 0.0).then(|| cost / energy),
    })
}

pub fn rollout(pd: &ProblemData, cone: &ConeParams, cfg: &RolloutConfig) -> Result<RolloutRecord> {
    rollout_indexed(&Policy::new(pd, cone)?, cfg, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub rollouts: usize,
    pub gamma_sq: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    /// One-sided 99% upper confidence bound on the mean ratio.
    pub upper_confidence: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub mean_cost: f64,
    pub mean_energy: f64,
    pub explore_fraction: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Per-rollout outcome used for aggregation.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    cost: f64,
    energy: f64,
    explore: f64,
}

fn run_parallel<T: Send, F>(count: usize, parallelism: Option<usize>, f: F) -> Result<Vec<T>>
where
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let work = || (0..count as u64).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match parallelism {
        Some(k) if k > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| DualError::Config(e.to_string()))?
            .install(work),
        _ => work(),
    }
}

/// Resolves strategies that need preprocessing (the adversary) into a
/// sampleable disturbance.
pub fn resolve_disturbance(policy: &Policy, cfg: &RolloutConfig, parallelism: Option<usize>) -> Result<Disturbance> {
    match &cfg.disturbance {
        Disturbance::Adversarial { rounds, probes } => {
            Ok(Disturbance::Sequence { values: hill_climb(policy, cfg, *rounds, (*probes).max(1), parallelism)? })
        }
        other => Ok(other.clone()),
    }
}

/// Monte-Carlo estimate of `E[cost] / sum |w|^2` over policy randomness.
pub fn monte_carlo_gain(
    pd: &ProblemData,
    cone: &ConeParams,
    cfg: &RolloutConfig,
    parallelism: Option<usize>,
) -> Result<GainReport> {
    let policy = Policy::new(pd, cone)?;
    cfg.validate(pd, cone)?;
    let resolved = RolloutConfig { disturbance: resolve_disturbance(&policy, cfg, parallelism)?, ..cfg.clone() };
    let outcomes = run_parallel(cfg.rollouts, parallelism, |k| {
        let rec = rollout_indexed(&policy, &resolved, k)?;
        Ok(Outcome { cost: rec.cumulative_cost, energy: rec.disturbance_energy, explore: rec.explore_fraction(0) })
    })?;
    summarize(pd, &outcomes)
}

/// Like [`monte_carlo_gain`] but keeps every rollout record.
pub fn simulate(
    pd: &ProblemData,
    cone: &ConeParams,
    cfg: &RolloutConfig,
    parallelism: Option<usize>,
) -> Result<(Vec<RolloutRecord>, GainReport)> {
    let policy = Policy::new(pd, cone)?;
    cfg.validate(pd, cone)?;
    let resolved = RolloutConfig { disturbance: resolve_disturbance(&policy, cfg, parallelism)?, ..cfg.clone() };
    let records = run_parallel(cfg.rollouts, parallelism, |k| rollout_indexed(&policy, &resolved, k))?;
    let outcomes: Vec<Outcome> = records
        .iter()
        .map(|rec| Outcome {
            cost: rec.cumulative_cost,
            energy: rec.disturbance_energy,
            explore: rec.explore_fraction(0),
        })
        .collect();
    let report = summarize(pd, &outcomes)?;
    Ok((records, report))
}

fn summarize(pd: &ProblemData, outcomes: &[Outcome]) -> Result<GainReport> {
    let count = outcomes.len() as f64;
    let mean_cost = outcomes.iter().map(|o| o.cost).sum::<f64>() / count;
    if outcomes.iter().any(|o| o.energy <= 0.0) {
        return Err(DualError::UndefinedRatio { cost: mean_cost });
    }
    let ratios: Vec<f64> = outcomes.iter().map(|o| o.cost / o.energy).collect();
    let mean = ratios.iter().sum::<f64>() / count;
    let var =
        if ratios.len() > 1 { ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (count - 1.0) } else { 0.0 };
    let std = var.sqrt();
    let ucb = mean + Z_99 * std / count.sqrt();
    let gamma_sq = pd.gamma_sq();
    Ok(GainReport {
        rollouts: outcomes.len(),
        gamma_sq,
        mean_ratio: mean,
        std_ratio: std,
        upper_confidence: ucb,
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_cost,
        mean_energy: outcomes.iter().map(|o| o.energy).sum::<f64>() / count,
        explore_fraction: outcomes.iter().map(|o| o.explore).sum::<f64>() / count,
        slack: GAIN_SLACK,
        pass: ucb <= gamma_sq * (1.0 + GAIN_SLACK),
    })
}

/// Searches for a fixed-energy disturbance sequence with a large expected
/// cost ratio. Candidates are scored with common policy seeds.
fn hill_climb(
    policy: &Policy,
    cfg: &RolloutConfig,
    rounds: usize,
    probes: usize,
    parallelism: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let n = policy.problem().n();
    let horizon = cfg.horizon;
    let energy = (horizon * n) as f64;
    let mut rng = stream_rng(cfg.seed ^ 0xad5e_55a1, u64::MAX);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let normalize = |mut w: Vec<f64>| {
        let e: f64 = w.iter().map(|v| v * v).sum();
        if e > 0.0 {
            let scale = (energy / e).sqrt();
            w.iter_mut().for_each(|v| *v *= scale);
        }
        w
    };
    let score = |flat: &[f64]| -> Result<f64> {
        let seq = Disturbance::Sequence { values: flat.chunks(n).map(|c| c.to_vec()).collect() };
        let probe_cfg = RolloutConfig { disturbance: seq, seed: cfg.seed ^ 0x9e37_79b9, ..cfg.clone() };
        let costs = run_parallel(probes, parallelism, |k| Ok(rollout_indexed(policy, &probe_cfg, k)?.cumulative_cost))?;
        Ok(costs.iter().sum::<f64>() / probes as f64 / energy)
    };
    let mut current = normalize((0..horizon * n).map(|_| normal.sample(&mut rng)).collect());
    let mut best = score(&current)?;
    let mut spread = 0.5;
    for _ in 0..rounds {
        let candidate = if rng.random::<f64>() < 0.2 {
            // Single-entry impulse move.
            let k = rng.random_range(0..horizon * n);
            let mut c = current.clone();
            c[k] += spread * energy.sqrt() * if rng.random::<bool>() { 1.0 } else { -1.0 };
            normalize(c)
        } else {
            normalize(current.iter().map(|v| v + spread * normal.sample(&mut rng)).collect())
        };
        let s = score(&candidate)?;
        if s > best {
            best = s;
            current = candidate;
            spread = (spread * 1.5).min(2.0);
        } else {
            spread = (spread * 0.9).max(0.02);
        }
    }
    Ok(current.chunks(n).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelescopingMode {
    /// Expectation over the recorded action law, evaluated exactly.
    Exact,
    /// The realized chain as a one-sample surrogate.
    Realized,
}

#[derive(Debug, Clone, Serialize)]
pub struct TelescopingReport {
    pub mode: TelescopingMode,
    pub steps: usize,
    pub violations: usize,
    /// Smallest `(V_hat(x_t, Z_t) + tol) - lhs` seen, normalized by `1 + |V_hat|`.
    pub worst_margin: f64,
    pub consistent: bool,
    pub pass: bool,
}

/// Checks `E|x_t|^2_S + E|u_t|^2_R + V_hat(x_{t+1}, Z_{t+1}) <= V_hat(x_t, Z_t)`
/// at every recorded step. A record whose costs, inputs or transitions do not
/// match its own data fails outright.
pub fn telescoping_check(
    pd: &ProblemData,
    cone: &ConeParams,
    record: &RolloutRecord,
    mode: TelescopingMode,
    rel_tol: f64,
) -> Result<TelescopingReport> {
    let n = pd.n();
    let b_true = DVector::from_column_slice(&record.b_true);
    let consistent = record_consistent(pd, &b_true, record);
    let mut data = DataMatrix::new(n);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for (k, st) in record.steps.iter().enumerate() {
        let x = DVector::from_column_slice(&st.x);
        let w = DVector::from_column_slice(&st.w);
        let next_realized =
            DVector::from_column_slice(record.steps.get(k + 1).map(|s| &s.x).unwrap_or(&record.terminal_state));
        let v_now = bellman::value_hat(pd, &data, cone, &x)?;
        let lhs = match mode {
            TelescopingMode::Exact => {
                let mut mean_z = data.matrix().clone();
                let (mut next_sq, mut input_cost) = (0.0, 0.0);
                for &(u, p) in &st.action.support {
                    let next = step(pd, &b_true, &x, u, &w);
                    let v = DataMatrix::stacked(&x, u, &next);
                    mean_z.ger(p, &v, &v, 1.0);
                    next_sq += p * next.norm_squared();
                    input_cost += p * pd.r() * u * u;
                }
                let mean_data = DataMatrix::from_matrix(n, mean_z, data.count() + 1)?;
                pd.state_cost(&x) + input_cost + bellman::value_hat_moments(pd, cone, next_sq, &mean_data)?
            }
            TelescopingMode::Realized => {
                let next_data = data.updated(&x, st.u, &next_realized)?;
                st.stage_cost + bellman::value_hat(pd, &next_data, cone, &next_realized)?
            }
        };
        let scale = 1.0 + v_now.abs();
        let margin = (v_now - lhs) / scale;
        worst = worst.min(margin);
        if margin < -rel_tol {
            violations += 1;
        }
        data.update(&x, st.u, &next_realized)?;
    }
    Ok(TelescopingReport {
        mode,
        steps: record.steps.len(),
        violations,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
        consistent,
        pass: consistent && violations == 0,
    })
}

fn record_consistent(pd: &ProblemData, b_true: &DVector<f64>, record: &RolloutRecord) -> bool {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    let mut total = 0.0;
    let mut energy = 0.0;
    for (k, st) in record.steps.iter().enumerate() {
        let x = DVector::from_column_slice(&st.x);
        let w = DVector::from_column_slice(&st.w);
        if !close(st.stage_cost, pd.state_cost(&x) + pd.r() * st.u * st.u) {
            return false;
        }
        if !st.action.support.iter().any(|(v, p)| *v == st.u && *p > 0.0) {
            return false;
        }
        let next = step(pd, b_true, &x, st.u, &w);
        let recorded = record.steps.get(k + 1).map(|s| &s.x).unwrap_or(&record.terminal_state);
        if next.iter().zip(recorded).any(|(a, b)| !close(*a, *b)) {
            return false;
        }
        total += st.stage_cost;
        energy += w.norm_squared();
    }
    close(total, record.cumulative_cost) && close(energy, record.disturbance_energy)
}

/// `z_{B_true}(Z_T)` against `gamma^2 sum |w_t|^2`; returns the relative gap.
pub fn energy_identity_gap(pd: &ProblemData, record: &RolloutRecord) -> Result<f64> {
    let data = record.final_statistic()?;
    let b = DVector::from_column_slice(&record.b_true);
    let z = statistics::z_b(pd, &data, &b);
    let target = pd.gamma_sq() * record.steps.iter().map(|s| s.w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    Ok((z - target).abs() / target.abs().max(f64::MIN_POSITIVE))
}
