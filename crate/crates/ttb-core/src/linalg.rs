//! Thin SVD, truncated SVD, and numerical rank for dense matrices.
//!
//! The factorization itself is delegated to nalgebra's implicit-shift SVD;
//! this module owns the contract: orthonormal factors, descending singular
//! values, and exact tail-energy truncation error.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("svd did not converge")]
    NoConvergence,
    #[error("truncation rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
}

/// Thin SVD factors: `a ~ u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `m x r`, orthonormal columns.
    pub u: Array2<f64>,
    /// Singular values, descending, length `r`.
    pub s: Array1<f64>,
    /// Right singular vectors, `n x r`, orthonormal columns.
    pub v: Array2<f64>,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.s.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.v.t())
    }
}

/// Full thin SVD of a dense matrix.
pub fn svd(a: ArrayView2<f64>) -> Result<SvdResult, LinalgError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let (m, n) = a.dim();
    let na = nalgebra::DMatrix::from_fn(m, n, |i, j| a[[i, j]]);
    // the implicit-shift iteration needs a few ulps of slack to converge
    let svd = na
        .try_svd(true, true, 5.0 * f64::EPSILON, 0)
        .ok_or(LinalgError::NoConvergence)?;
    let r = svd.singular_values.len();
    let u_na = svd.u.ok_or(LinalgError::NoConvergence)?;
    let vt_na = svd.v_t.ok_or(LinalgError::NoConvergence)?;
    let u = Array2::from_shape_fn((m, r), |(i, j)| u_na[(i, j)]);
    let v = Array2::from_shape_fn((n, r), |(i, j)| vt_na[(j, i)]);
    let s = Array1::from_iter(svd.singular_values.iter().copied());
    Ok(SvdResult { u, s, v })
}

/// Number of singular values above `rel_tol * s_max`; 0 for a zero matrix.
pub fn numerical_rank(a: ArrayView2<f64>, rel_tol: f64) -> Result<usize, LinalgError> {
    let result = svd(a)?;
    let smax = result.s.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return Ok(0);
    }
    Ok(result.s.iter().filter(|&&x| x > rel_tol * smax).count())
}

/// Default relative tolerance for [`numerical_rank`]:
/// `1e-8 * max(rows, cols)`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    1e-8 * rows.max(cols) as f64
}

/// Best rank-`r` factors; truncation error is the tail energy
/// `sum_{i>r} s_i^2`.
pub fn truncated_svd(a: ArrayView2<f64>, r: usize) -> Result<SvdResult, LinalgError> {
    let (m, n) = a.dim();
    let max = m.min(n);
    if r == 0 || r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max });
    }
    let full = svd(a)?;
    let keep = r.min(full.rank());
    Ok(SvdResult {
        u: full.u.slice(ndarray::s![.., ..keep]).to_owned(),
        s: full.s.slice(ndarray::s![..keep]).to_owned(),
        v: full.v.slice(ndarray::s![.., ..keep]).to_owned(),
    })
}
