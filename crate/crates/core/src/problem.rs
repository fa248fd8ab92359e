//! Problem instance: known dynamics `A`, cost weights `S` and `R`, the bound
//! `beta` on the unknown input vector and the gain level `gamma`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{DualError, Result};
use crate::linalg;

/// Immutable problem instance together with its derived constants.
#[derive(Debug, Clone)]
pub struct ProblemData {
    a: DMatrix<f64>,
    s: DMatrix<f64>,
    r: f64,
    beta: f64,
    gamma: f64,
    a_norm: f64,
    tau: f64,
    rbar: f64,
}

/// Outcome of the gain-level admissibility test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Admissibility {
    pub gamma_sq: f64,
    /// Right-hand side `tau * max{1 + 2R + beta^2, |S^-1|}`; infinite for singular `S`.
    pub threshold: f64,
    pub s_inv_norm: f64,
    pub admissible: bool,
}

impl ProblemData {
    pub fn new(a: DMatrix<f64>, s: DMatrix<f64>, r: f64, beta: f64, gamma: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(DualError::InvalidInstance(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if s.nrows() != n || s.ncols() != n {
            return Err(DualError::InvalidInstance(format!("S is {}x{} but A is {n}x{n}", s.nrows(), s.ncols())));
        }
        if a.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(DualError::InvalidInstance("non-finite matrix entry".into()));
        }
        if !(gamma.is_finite() && gamma > 1.0) {
            return Err(DualError::InvalidInstance(format!("gamma must exceed 1, got {gamma}")));
        }
        // R = 0 is accepted: every admissible B has |B| >= 1, so gains stay finite.
        if !(r.is_finite() && r >= 0.0) {
            return Err(DualError::InvalidInstance(format!("R must be nonnegative, got {r}")));
        }
        if !(beta.is_finite() && beta >= 1.0) {
            return Err(DualError::InvalidInstance(format!("beta must be at least 1, got {beta}")));
        }
        let s_scale = s.norm().max(f64::MIN_POSITIVE);
        let asym = (&s - s.transpose()).amax();
        if asym > 1e-12 * s_scale {
            return Err(DualError::InvalidInstance(format!("S is not symmetric (deviation {asym:e})")));
        }
        let s = linalg::symmetrize(&s);
        let s_min = linalg::min_eigenvalue(&s)?;
        if s_min < -1e-12 * s_scale {
            return Err(DualError::InvalidInstance(format!(
                "S is not positive semidefinite (min eigenvalue {s_min:e})"
            )));
        }
        let a_norm = linalg::spectral_norm(&a)?;
        let factor = 1.0 - gamma.powi(-2);
        let tau = 1.0 + 2.0 * a_norm * a_norm / factor;
        Ok(Self { a, s, r, beta, gamma, a_norm, tau, rbar: factor * r })
    }

    /// Scalar convenience constructor for `n = 1`.
    pub fn scalar(a: f64, s: f64, r: f64, beta: f64, gamma: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, s), r, beta, gamma)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn gamma_sq(&self) -> f64 {
        self.gamma * self.gamma
    }
    /// `1 - gamma^-2`.
    pub fn gain_factor(&self) -> f64 {
        1.0 - self.gamma.powi(-2)
    }
    /// `1 + 2|A|^2 / (1 - gamma^-2)` with the spectral norm of `A`.
    pub fn tau(&self) -> f64 {
        self.tau
    }
    /// `(1 - gamma^-2) R`.
    pub fn rbar(&self) -> f64 {
        self.rbar
    }
    pub fn a_norm(&self) -> f64 {
        self.a_norm
    }

    pub fn state_cost(&self, x: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.s, x)
    }

    pub fn admissibility(&self) -> Result<Admissibility> {
        let s_min = linalg::min_eigenvalue(&self.s)?;
        let s_scale = self.s.norm().max(f64::MIN_POSITIVE);
        let s_inv_norm = if s_min <= 1e-12 * s_scale { f64::INFINITY } else { 1.0 / s_min };
        let input_term = 1.0 + 2.0 * self.r + self.beta * self.beta;
        let threshold = self.tau * input_term.max(s_inv_norm);
        let gamma_sq = self.gamma_sq();
        Ok(Admissibility { gamma_sq, threshold, s_inv_norm, admissible: gamma_sq >= threshold })
    }

    /// Whether `gamma^2 >= tau * max{1 + 2R + beta^2, |S^-1|}`; singular `S` gives `false`.
    pub fn validate_gamma(&self) -> bool {
        self.admissibility().map(|a| a.admissible).unwrap_or(false)
    }

    pub fn require_admissible(&self) -> Result<()> {
        let adm = self.admissibility()?;
        if adm.admissible {
            Ok(())
        } else {
            Err(DualError::Admissibility { gamma: self.gamma, threshold: adm.threshold })
        }
    }
}
