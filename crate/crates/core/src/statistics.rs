//! Sufficient statistic of observed transitions and the data misfit
//! functionals built from it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DualError, Result};
use crate::problem::ProblemData;
use crate::uncertainty::{self, ConeParams};

/// Gram matrix of stacked `(x, u, x_next)` triples, `(2n+1) x (2n+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DataMatrixRepr", try_from = "DataMatrixRepr")]
pub struct DataMatrix {
    n: usize,
    z: DMatrix<f64>,
    count: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataMatrixRepr {
    n: usize,
    count: u64,
    /// Row-major entries.
    z: Vec<f64>,
}

impl From<DataMatrix> for DataMatrixRepr {
    fn from(d: DataMatrix) -> Self {
        let z = d.z.transpose().as_slice().to_vec();
        Self { n: d.n, count: d.count, z }
    }
}

impl TryFrom<DataMatrixRepr> for DataMatrix {
    type Error = String;
    fn try_from(r: DataMatrixRepr) -> std::result::Result<Self, String> {
        let dim = 2 * r.n + 1;
        if r.n == 0 || r.z.len() != dim * dim {
            return Err(format!("expected {} entries for n = {}, got {}", dim * dim, r.n, r.z.len()));
        }
        Ok(Self { n: r.n, z: DMatrix::from_row_slice(dim, dim, &r.z), count: r.count })
    }
}

impl DataMatrix {
    pub fn new(n: usize) -> Self {
        let dim = 2 * n + 1;
        Self { n, z: DMatrix::zeros(dim, dim), count: 0 }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn count(&self) -> u64 {
        self.count
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Builds a statistic from an arbitrary symmetric matrix, e.g. an expected value.
    pub fn from_matrix(n: usize, z: DMatrix<f64>, count: u64) -> Result<Self> {
        let dim = 2 * n + 1;
        if z.nrows() != dim || z.ncols() != dim {
            return Err(DualError::InvalidInstance(format!("statistic must be {dim}x{dim}")));
        }
        Ok(Self { n, z: crate::linalg::symmetrize(&z), count })
    }

    pub fn stacked(x: &DVector<f64>, u: f64, x_next: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut v = DVector::zeros(2 * n + 1);
        v.rows_mut(0, n).copy_from(x);
        v[n] = u;
        v.rows_mut(n + 1, n).copy_from(x_next);
        v
    }

    /// Adds the outer product of `(x, u, x_next)`.
    pub fn update(&mut self, x: &DVector<f64>, u: f64, x_next: &DVector<f64>) -> Result<()> {
        if x.len() != self.n || x_next.len() != self.n {
            return Err(DualError::InvalidInstance(format!(
                "transition dimensions ({}, {}) do not match n = {}",
                x.len(),
                x_next.len(),
                self.n
            )));
        }
        let v = Self::stacked(x, u, x_next);
        self.z.ger(1.0, &v, &v, 1.0);
        self.z = crate::linalg::symmetrize(&self.z);
        self.count += 1;
        Ok(())
    }

    pub fn updated(&self, x: &DVector<f64>, u: f64, x_next: &DVector<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.update(x, u, x_next)?;
        Ok(next)
    }

    /// Precomputes the polynomial form of the misfit for the given problem.
    pub fn parts(&self, pd: &ProblemData) -> MisfitParts {
        let n = self.n;
        let a = pd.a();
        let zxx = self.z.view((0, 0), (n, n));
        let zxu = self.z.view((0, n), (n, 1));
        let zxp = self.z.view((0, n + 1), (n, n));
        let zuu = self.z[(n, n)];
        let zup = self.z.view((n, n + 1), (1, n));
        let zpp = self.z.view((n + 1, n + 1), (n, n));
        let constant = (a * zxx * a.transpose()).trace() - 2.0 * (a * zxp).trace() + zpp.trace();
        let linear = a * zxu - zup.transpose();
        MisfitParts {
            gamma_sq: pd.gamma_sq(),
            constant,
            linear: DVector::from_column_slice(linear.as_slice()),
            quadratic: zuu,
        }
    }
}

/// `z_B = gamma^2 (c + 2 B'l + Z_uu |B|^2)`: every dependence of the misfit on `B`
/// in one place. `c` and `l` collect the `B`-independent and linear terms.
#[derive(Debug, Clone)]
pub struct MisfitParts {
    pub gamma_sq: f64,
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: f64,
}

impl MisfitParts {
    pub fn z(&self, b: &DVector<f64>) -> f64 {
        self.gamma_sq * (self.constant + 2.0 * b.dot(&self.linear) + self.quadratic * b.norm_squared())
    }

    /// `(z_{-B} - z_B) / 2`.
    pub fn z_tilde(&self, b: &DVector<f64>) -> f64 {
        -2.0 * self.gamma_sq * b.dot(&self.linear)
    }

    /// `(z_B + z_{-B}) / 2`, which depends on `B` only through `|B|^2`.
    pub fn even(&self, norm_sq: f64) -> f64 {
        self.gamma_sq * (self.constant + self.quadratic * norm_sq)
    }
}

/// `gamma^2 tr([A B -I] Z [A B -I]')`, evaluated directly.
pub fn z_b(pd: &ProblemData, data: &DataMatrix, b: &DVector<f64>) -> f64 {
    let n = pd.n();
    let mut m = DMatrix::zeros(n, 2 * n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(pd.a());
    m.set_column(n, b);
    m.view_mut((0, n + 1), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
    pd.gamma_sq() * (&m * data.matrix() * m.transpose()).trace()
}

pub fn z_tilde(pd: &ProblemData, data: &DataMatrix, b: &DVector<f64>) -> f64 {
    (z_b(pd, data, &(-b)) - z_b(pd, data, b)) / 2.0
}

/// `min over the admissible set of (z_B + z_{-B}) / 2`, attained at minimum norm.
pub fn z_bar(pd: &ProblemData, data: &DataMatrix, cone: &ConeParams) -> Result<f64> {
    let min_sq = uncertainty::min_norm_sq(pd, cone)?;
    Ok(data.parts(pd).even(min_sq))
}
