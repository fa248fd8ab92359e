//! Small dense helpers on top of nalgebra. Dimensions here are tiny
//! (state dimension rarely above 10), so everything is dense.

use nalgebra::{DMatrix, DVector};

use crate::error::{DualError, Result};

/// Eigenvalues sorted in descending order with matching eigenvector columns.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> Result<SortedEigen> {
    if !m.is_square() {
        return Err(DualError::InvalidInstance(format!(
            "eigendecomposition of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DualError::Numeric("non-finite matrix entry".into()));
    }
    let sym = symmetrize(m);
    let eig = sym
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| DualError::Numeric("symmetric eigensolver did not converge".into()))?;
    let n = sym.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SortedEigen { values, vectors })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = a.transpose() * a;
    let eig = symmetric_eigen_desc(&gram)?;
    Ok(eig.values[0].max(0.0).sqrt())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let eig = symmetric_eigen_desc(m)?;
    Ok(*eig.values.last().expect("non-empty matrix"))
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Orthonormal basis of the orthogonal complement of a unit vector, as columns.
pub fn orthonormal_complement(unit: &DVector<f64>) -> DMatrix<f64> {
    let n = unit.len();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n {
        if basis.len() + 1 == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[k] = 1.0;
        v -= unit * unit.dot(&v);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut out = DMatrix::zeros(n, basis.len());
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    out
}
