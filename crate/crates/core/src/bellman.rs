//! Explicit value function and the one-step Bellman inequality check.
//!
//! `V_hat(x, Z) = max{ |x|^2 - min_B z_B, tau |x|^2 - z_bar }`. The operator
//! `F_u` is applied in closed form with exact expectations over the finite
//! support of the action, so no sampling enters a pass/fail decision.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::Result;
use crate::policy::{ActionDistribution, Branch, Policy};
use crate::problem::ProblemData;
use crate::statistics::{self, DataMatrix};
use crate::uncertainty::{self, ConeParams};

pub const DEFAULT_TOLERANCE: f64 = 1e-7;

/// `min over the admissible set of z_B`.
pub fn min_misfit(pd: &ProblemData, data: &DataMatrix, cone: &ConeParams) -> Result<f64> {
    let parts = data.parts(pd);
    let hints = [parts.linear.clone()];
    let best = uncertainty::maximize_over_set(pd, cone, |b| -parts.z(b), &hints)?;
    Ok(-best.value)
}

/// `V_hat` at a state whose squared norm has mean `x_sq` and a statistic with
/// mean `data`. Both branches are affine in `(|x|^2, Z)`, so this is also the
/// value of a random pair.
pub fn value_hat_moments(pd: &ProblemData, cone: &ConeParams, x_sq: f64, data: &DataMatrix) -> Result<f64> {
    let fit = x_sq - min_misfit(pd, data, cone)?;
    let fallback = pd.tau() * x_sq - statistics::z_bar(pd, data, cone)?;
    Ok(fit.max(fallback))
}

pub fn value_hat(pd: &ProblemData, data: &DataMatrix, cone: &ConeParams, x: &DVector<f64>) -> Result<f64> {
    value_hat_moments(pd, cone, x.norm_squared(), data)
}

/// `E(|x|^2_S + |u|^2_R + (1 - gamma^-2)^-1 |Ax + Bu|^2 - z_B)`.
pub fn f_u_vb(
    pd: &ProblemData,
    data: &DataMatrix,
    x: &DVector<f64>,
    action: &ActionDistribution,
    b: &DVector<f64>,
) -> f64 {
    let parts = data.parts(pd);
    let ax = pd.a() * x;
    f_u_vb_with(pd, &ax, pd.state_cost(x), &parts, action, b)
}

fn f_u_vb_with(
    pd: &ProblemData,
    ax: &DVector<f64>,
    state_cost: f64,
    parts: &statistics::MisfitParts,
    action: &ActionDistribution,
    b: &DVector<f64>,
) -> f64 {
    let (m1, m2) = (action.mean, action.second_moment);
    let next_sq = ax.norm_squared() + 2.0 * m1 * b.dot(ax) + m2 * b.norm_squared();
    state_cost + m2 * pd.r() + next_sq / pd.gain_factor() - parts.z(b)
}

/// Closed-form bound on `F_u V_bar`:
/// `E(|x|^2_S + |u|^2_R + |Ax|^2 / (tau^-1 - gamma^-2) - gamma^2 u^2) - z_bar`.
pub fn f_u_vbar(
    pd: &ProblemData,
    data: &DataMatrix,
    cone: &ConeParams,
    x: &DVector<f64>,
    action: &ActionDistribution,
) -> Result<f64> {
    let ax_sq = (pd.a() * x).norm_squared();
    let m2 = action.second_moment;
    let denom = 1.0 / pd.tau() - pd.gamma().powi(-2);
    Ok(pd.state_cost(x) + m2 * pd.r() + ax_sq / denom - pd.gamma_sq() * m2 - statistics::z_bar(pd, data, cone)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BellmanReport {
    pub x: Vec<f64>,
    pub count: u64,
    pub branch: Branch,
    pub value_hat: f64,
    /// `max over B of F_u V_B`.
    pub lhs_exploit_family: f64,
    /// Upper form of `F_u V_bar`.
    pub lhs_bar: f64,
    /// `value_hat - max(lhs_exploit_family, lhs_bar)`.
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks the Bellman inequality at `(x, Z)` with `tol = coef (1 + |V_hat|)`.
pub fn check_bellman_with(policy: &Policy, data: &DataMatrix, x: &DVector<f64>, coef: f64) -> Result<BellmanReport> {
    let pd = policy.problem();
    let cone = policy.cone();
    let decision = policy.decide(data, x)?;
    let action = &decision.action;
    let value = value_hat(pd, data, cone, x)?;
    let lhs_bar = f_u_vbar(pd, data, cone, x, action)?;

    let parts = data.parts(pd);
    let ax = pd.a() * x;
    let state_cost = pd.state_cost(x);
    let hints = [ax.clone(), parts.linear.clone(), decision.b_hat.clone()];
    let family =
        uncertainty::maximize_over_set(pd, cone, |b| f_u_vb_with(pd, &ax, state_cost, &parts, action, b), &hints)?;
    let at_bhat = f_u_vb_with(pd, &ax, state_cost, &parts, action, &decision.b_hat).max(f_u_vb_with(
        pd,
        &ax,
        state_cost,
        &parts,
        action,
        &(-&decision.b_hat),
    ));
    let lhs_family = family.value.max(at_bhat);

    let margin = value - lhs_family.max(lhs_bar);
    let tolerance = coef * (1.0 + value.abs());
    Ok(BellmanReport {
        x: x.iter().copied().collect(),
        count: data.count(),
        branch: decision.branch,
        value_hat: value,
        lhs_exploit_family: lhs_family,
        lhs_bar,
        margin,
        tolerance,
        pass: margin >= -tolerance,
    })
}

pub fn check_bellman(
    pd: &ProblemData,
    data: &DataMatrix,
    cone: &ConeParams,
    x: &DVector<f64>,
) -> Result<BellmanReport> {
    check_bellman_with(&Policy::new(pd, cone)?, data, x, DEFAULT_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy;

    fn p1() -> (ProblemData, ConeParams) {
        let pd = ProblemData::scalar(1.0, 0.5, 1.0, 2.0, 5.0).unwrap();
        let cone = uncertainty::compute_cone(&pd).unwrap();
        (pd, cone)
    }

    fn s(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn single() -> DataMatrix {
        let mut d = DataMatrix::new(1);
        d.update(&s(1.0), 1.0, &s(2.0)).unwrap();
        d
    }

    #[test]
    fn value_hat_examples() {
        let (pd, cone) = p1();
        let v = value_hat(&pd, &DataMatrix::new(1), &cone, &s(1.0)).unwrap();
        assert!((v - 3.083_333_333_333_333).abs() < 1e-12);
        let v = value_hat(&pd, &single(), &cone, &s(1.0)).unwrap();
        let expect = 1.0 - 25.0 * (1.04f64.sqrt() - 1.0).powi(2);
        assert!((v - expect).abs() < 1e-10);
        assert!((v - 0.9902).abs() < 1e-4);
        assert_eq!(value_hat(&pd, &DataMatrix::new(1), &cone, &s(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn operator_examples() {
        let (pd, cone) = p1();
        let z0 = DataMatrix::new(1);
        let u = ActionDistribution::deterministic(-0.46729);
        let expect = 0.5 + 0.46729f64.powi(2) + (1.0 - 1.5 * 0.46729f64).powi(2) / 0.96;
        assert!((f_u_vb(&pd, &z0, &s(1.0), &u, &s(1.5)) - expect).abs() < 1e-12);
        assert!((expect - 0.81153).abs() < 1e-5);
        let zero = ActionDistribution::deterministic(0.0);
        assert!((f_u_vb(&pd, &z0, &s(1.0), &zero, &s(1.3)) - (0.5 + 1.0 / 0.96)).abs() < 1e-12);
        assert_eq!(f_u_vb(&pd, &z0, &s(0.0), &zero, &s(1.3)), 0.0);

        let two = ActionDistribution::two_point(0.0, 2.0 / 4.96);
        let vbar = f_u_vbar(&pd, &z0, &cone, &s(1.0), &two).unwrap();
        let k2 = (2.0f64 / 4.96).powi(2);
        let exact = 0.5 + k2 + 1.0 / (1.0 / pd.tau() - 0.04) - 25.0 * k2;
        assert!((vbar - exact).abs() < 1e-12);
        assert!((vbar - 0.11495).abs() < 5e-5);
        assert_eq!(f_u_vbar(&pd, &z0, &cone, &s(0.0), &zero).unwrap(), 0.0);
        let vbar = f_u_vbar(&pd, &single(), &cone, &s(1.0), &zero).unwrap();
        assert!((vbar + 46.98288).abs() < 1e-5);
    }

    #[test]
    fn bellman_examples_pass() {
        let (pd, cone) = p1();
        let r = check_bellman(&pd, &DataMatrix::new(1), &cone, &s(1.0)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.lhs_bar - 0.11495).abs() < 5e-5);
        assert!((r.value_hat - 3.083_333_333_333_333).abs() < 1e-12);
        let r = check_bellman(&pd, &single(), &cone, &s(1.0)).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_bellman(&pd, &DataMatrix::new(1), &cone, &s(0.0)).unwrap();
        assert!(r.pass);
        assert!(r.margin.abs() < 1e-12);
    }

    #[test]
    fn negative_tolerance_fails() {
        let (pd, cone) = p1();
        let policy = Policy::new(&pd, &cone).unwrap();
        let r = check_bellman_with(&policy, &DataMatrix::new(1), &s(0.0), -1.0).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn explore_cancellation_and_exploit_identity() {
        let (pd, cone) = p1();
        let z0 = DataMatrix::new(1);
        let d = policy::decide(&pd, &z0, &cone, &s(1.0)).unwrap();
        assert_eq!(d.branch, Branch::Explore);
        let plus = f_u_vb(&pd, &z0, &s(1.0), &d.action, &d.b_hat);
        let minus = f_u_vb(&pd, &z0, &s(1.0), &d.action, &(-&d.b_hat));
        assert!((plus - minus).abs() <= 1e-10 * (1.0 + plus.abs()));

        let z1 = single();
        let d = policy::decide(&pd, &z1, &cone, &s(1.0)).unwrap();
        assert_eq!(d.branch, Branch::Exploit);
        let plus = f_u_vb(&pd, &z1, &s(1.0), &d.action, &d.b_hat);
        let minus = f_u_vb(&pd, &z1, &s(1.0), &d.action, &(-&d.b_hat));
        let shift = 4.0 * d.khat_x * d.b_hat_ax / pd.gain_factor() - 2.0 * d.ztilde_at_bhat;
        assert!((minus - (plus + shift)).abs() <= 1e-10 * (1.0 + minus.abs()));
        assert!(minus <= plus);
    }
}
