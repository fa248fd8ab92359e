//! The dual feedback law.
//!
//! Given the current state `x` and statistic `Z`, the controller picks the
//! worst-case input vector estimate `B_hat`, then either applies the
//! certainty-equivalence input `-K_hat x` (exploit) or a randomized input whose
//! mean is shifted toward excitation and whose second moment is `|K_hat x|^2`
//! (explore).

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DualError, Result};
use crate::problem::ProblemData;
use crate::statistics::{DataMatrix, MisfitParts};
use crate::uncertainty::{self, ConeParams};

/// Finite-support law of a scalar input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    /// `(value, probability)` pairs.
    pub support: Vec<(f64, f64)>,
    pub mean: f64,
    pub second_moment: f64,
}

impl ActionDistribution {
    pub fn deterministic(value: f64) -> Self {
        Self { support: vec![(value, 1.0)], mean: value, second_moment: value * value }
    }

    /// Law on `{+a, -a}` with mean `m`; requires `|m| <= a`.
    pub fn two_point(mean: f64, amplitude: f64) -> Self {
        let a = amplitude.abs();
        if a == 0.0 {
            return Self::deterministic(0.0);
        }
        let m = mean.clamp(-a, a);
        let p = 0.5 * (1.0 + m / a);
        Self { support: vec![(a, p), (-a, 1.0 - p)], mean: m, second_moment: a * a }
    }

    pub fn is_deterministic(&self) -> bool {
        self.support.iter().filter(|(_, p)| *p > 0.0).count() <= 1
    }

    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean * self.mean
    }

    /// Moments recomputed from the support.
    pub fn support_moments(&self) -> (f64, f64) {
        self.support.iter().fold((0.0, 0.0), |(m1, m2), (v, p)| (m1 + p * v, m2 + p * v * v))
    }

    pub fn realize<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if let [(v, _)] = self.support.as_slice() {
            return *v;
        }
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in &self.support {
            acc += p;
            if draw < acc {
                return *v;
            }
        }
        self.support.last().map(|(v, _)| *v).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Exploit,
    Explore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub branch: Branch,
    pub b_hat: DVector<f64>,
    /// `K_hat x`.
    pub khat_x: f64,
    /// `B_hat' A x`.
    pub b_hat_ax: f64,
    pub ztilde_at_bhat: f64,
    pub action: ActionDistribution,
}

/// `((1 - gamma^-2) R + |B|^2)^-1 B' A x`.
pub fn gain_times_x(pd: &ProblemData, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let denom = pd.rbar() + b.norm_squared();
    if denom == 0.0 {
        return 0.0;
    }
    b.dot(&(pd.a() * x)) / denom
}

/// The two expressions compared when selecting `B_hat`.
#[derive(Debug, Clone)]
pub struct EstimateObjective {
    ax: DVector<f64>,
    ax_sq: f64,
    factor: f64,
    rbar: f64,
    parts: MisfitParts,
}

impl EstimateObjective {
    pub fn new(pd: &ProblemData, data: &DataMatrix, x: &DVector<f64>) -> Self {
        let ax = pd.a() * x;
        Self { ax_sq: ax.norm_squared(), ax, factor: pd.gain_factor(), rbar: pd.rbar(), parts: data.parts(pd) }
    }

    fn coupling(&self, b: &DVector<f64>) -> f64 {
        let bax = b.dot(&self.ax);
        bax * bax / (b.norm_squared() + self.rbar)
    }

    /// `min_u (|u|^2_R + |Ax + Bu|^2 / (1 - gamma^-2)) - z_B`.
    pub fn exploit_term(&self, b: &DVector<f64>) -> f64 {
        (self.ax_sq - self.coupling(b)) / self.factor - self.parts.z(b)
    }

    /// `(|Ax|^2 + ((1 - gamma^-2) R + |B|^2)^-1 (B'Ax)^2) / (1 - gamma^-2) - (z_B + z_{-B}) / 2`.
    pub fn explore_term(&self, b: &DVector<f64>) -> f64 {
        (self.ax_sq + self.coupling(b)) / self.factor - self.parts.even(b.norm_squared())
    }

    pub fn value(&self, b: &DVector<f64>) -> f64 {
        self.exploit_term(b).max(self.explore_term(b))
    }

    pub fn ax(&self) -> &DVector<f64> {
        &self.ax
    }

    pub fn parts(&self) -> &MisfitParts {
        &self.parts
    }
}

/// Orders candidate estimates: larger objective, then `z_tilde >= 0`, then
/// `B'Ax >= 0`, then lexicographic on coordinates.
fn prefer(obj: &EstimateObjective, a: &(DVector<f64>, f64), b: &(DVector<f64>, f64)) -> bool {
    let tol = 1e-12 * (1.0 + a.1.abs().max(b.1.abs()));
    if (a.1 - b.1).abs() > tol {
        return a.1 > b.1;
    }
    let zt = |v: &DVector<f64>| obj.parts.z_tilde(v) >= 0.0;
    if zt(&a.0) != zt(&b.0) {
        return zt(&a.0);
    }
    let ax = |v: &DVector<f64>| v.dot(&obj.ax) >= 0.0;
    if ax(&a.0) != ax(&b.0) {
        return ax(&a.0);
    }
    for (p, q) in a.0.iter().zip(b.0.iter()) {
        if p != q {
            return p > q;
        }
    }
    true
}

/// Flips the sign of `b` when that does not lower the objective and moves
/// toward `z_tilde >= 0`, breaking exact ties toward `B'Ax >= 0`.
fn orient(obj: &EstimateObjective, b: DVector<f64>) -> DVector<f64> {
    let zt = obj.parts.z_tilde(&b);
    if zt < 0.0 || (zt == 0.0 && b.dot(&obj.ax) < 0.0) {
        -b
    } else {
        b
    }
}

/// Worst-case estimate `B_hat`, the maximizer of [`EstimateObjective::value`].
pub fn select_bhat(pd: &ProblemData, data: &DataMatrix, cone: &ConeParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let obj = EstimateObjective::new(pd, data, x);
    select_with(pd, cone, &obj).map(|(b, _)| b)
}

fn select_with(pd: &ProblemData, cone: &ConeParams, obj: &EstimateObjective) -> Result<(DVector<f64>, f64)> {
    let hints = [obj.ax.clone(), obj.parts.linear.clone()];
    let first = uncertainty::maximize_over_set(pd, cone, |b| obj.exploit_term(b), &hints)?;
    let second = uncertainty::maximize_over_set(pd, cone, |b| obj.explore_term(b), &hints)?;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for cand in [first.point, second.point] {
        let b = orient(obj, cand);
        let v = obj.value(&b);
        let entry = (b, v);
        if best.as_ref().is_none_or(|cur| prefer(obj, &entry, cur)) {
            best = Some(entry);
        }
    }
    Ok(best.expect("two candidates"))
}

/// Feedback law bound to one admissible problem instance.
#[derive(Debug, Clone)]
pub struct Policy {
    pd: ProblemData,
    cone: ConeParams,
}

impl Policy {
    pub fn new(pd: &ProblemData, cone: &ConeParams) -> Result<Self> {
        pd.require_admissible()?;
        uncertainty::min_norm_sq(pd, cone)?;
        Ok(Self { pd: pd.clone(), cone: cone.clone() })
    }

    pub fn problem(&self) -> &ProblemData {
        &self.pd
    }

    pub fn cone(&self) -> &ConeParams {
        &self.cone
    }

    pub fn decide(&self, data: &DataMatrix, x: &DVector<f64>) -> Result<PolicyDecision> {
        let pd = &self.pd;
        if x.len() != pd.n() || data.n() != pd.n() {
            return Err(DualError::InvalidInstance("state or statistic dimension mismatch".into()));
        }
        let obj = EstimateObjective::new(pd, data, x);
        let (b_hat, _) = select_with(pd, &self.cone, &obj)?;
        let khat_x = gain_times_x(pd, &b_hat, x);
        let b_hat_ax = b_hat.dot(&obj.ax);
        let ztilde = obj.parts.z_tilde(&b_hat);
        let factor = pd.gain_factor();
        if ztilde >= 2.0 * khat_x * b_hat_ax / factor {
            return Ok(PolicyDecision {
                branch: Branch::Exploit,
                b_hat,
                khat_x,
                b_hat_ax,
                ztilde_at_bhat: ztilde,
                // `0.0 - k` rather than `-k` keeps a zero input at +0.
                action: ActionDistribution::deterministic(0.0 - khat_x),
            });
        }
        // Failing the exploit test with z_tilde >= 0 forces B_hat'Ax != 0.
        assert!(b_hat_ax != 0.0, "explore branch with B_hat'Ax = 0");
        let mean = (pd.gamma().powi(-2) - 1.0) * ztilde / (2.0 * b_hat_ax);
        Ok(PolicyDecision {
            branch: Branch::Explore,
            b_hat,
            khat_x,
            b_hat_ax,
            ztilde_at_bhat: ztilde,
            action: ActionDistribution::two_point(mean, khat_x),
        })
    }
}

pub fn decide(pd: &ProblemData, data: &DataMatrix, cone: &ConeParams, x: &DVector<f64>) -> Result<PolicyDecision> {
    Policy::new(pd, cone)?.decide(data, x)
}

/// Policy plus its running statistic, with the last decision memoized per
/// `(x, statistic version)`.
#[derive(Debug, Clone)]
pub struct Controller {
    policy: Policy,
    data: DataMatrix,
    version: u64,
    memo: Option<(Vec<u64>, u64, PolicyDecision)>,
}

impl Controller {
    pub fn new(policy: Policy) -> Self {
        let n = policy.pd.n();
        Self { policy, data: DataMatrix::new(n), version: 0, memo: None }
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn decide(&mut self, x: &DVector<f64>) -> Result<PolicyDecision> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some((k, ver, d)) = &self.memo {
            if *k == key && *ver == self.version {
                return Ok(d.clone());
            }
        }
        let d = self.policy.decide(&self.data, x)?;
        self.memo = Some((key, self.version, d.clone()));
        Ok(d)
    }

    pub fn observe(&mut self, x: &DVector<f64>, u: f64, x_next: &DVector<f64>) -> Result<()> {
        self.data.update(x, u, x_next)?;
        self.version += 1;
        Ok(())
    }
}
