//! Dense decompositions on top of `nalgebra`, exchanged as `ndarray` matrices.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Smallest diagonal jitter added on top of `max(0, -lambda_min)` when repairing.
pub const RIDGE_FLOOR: f64 = 1e-8;

pub fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_nalgebra(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

pub fn symmetric_eigenvalues(a: ArrayView2<'_, f64>) -> Array1<f64> {
    let eig = to_nalgebra(a).symmetric_eigen();
    Array1::from_iter(eig.eigenvalues.iter().copied())
}

pub fn min_eigenvalue(a: ArrayView2<'_, f64>) -> f64 {
    symmetric_eigenvalues(a).iter().copied().fold(f64::INFINITY, f64::min)
}

/// Lower Cholesky factor `L` with `L L^T = a`, or `None` if `a` is not numerically PD.
pub fn cholesky_lower(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    to_nalgebra(a).cholesky().map(|c| from_nalgebra(&c.l()))
}

/// Cholesky with ridge repair: on failure, `a + delta I` is factored with
/// `delta = max(0, -lambda_min(a)) + RIDGE_FLOOR`. Returns the factor and the
/// ridge that was applied (0 when none was needed).
pub fn cholesky_repaired(a: ArrayView2<'_, f64>, what: &str) -> Result<(Array2<f64>, f64)> {
    if let Some(l) = cholesky_lower(a) {
        return Ok((l, 0.0));
    }
    let delta = (-min_eigenvalue(a)).max(0.0) + RIDGE_FLOOR;
    let mut repaired = a.to_owned();
    repaired.diag_mut().mapv_inplace(|d| d + delta);
    cholesky_lower(repaired.view())
        .map(|l| (l, delta))
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Ridge that makes a symmetric matrix safely positive definite.
pub fn psd_ridge(a: ArrayView2<'_, f64>) -> f64 {
    let lmin = min_eigenvalue(a);
    if lmin > RIDGE_FLOOR {
        0.0
    } else {
        (-lmin).max(0.0) + RIDGE_FLOOR
    }
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: ArrayView2<'_, f64>, what: &str) -> Result<Array2<f64>> {
    let chol = to_nalgebra(a)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(from_nalgebra(&chol.inverse()))
}

/// Orthonormal basis for the column span of a full-column-rank matrix (thin QR).
pub fn orthonormal_columns(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let qr = to_nalgebra(a).qr();
    from_nalgebra(&qr.q())
}

/// `dim x dim` matrix with ones on the diagonal and `rho` elsewhere.
pub fn equicorrelation(dim: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((dim, dim), |(i, j)| if i == j { 1.0 } else { rho })
}

/// Sample covariance with the `n - 1` denominator.
pub fn sample_covariance(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = &x - &mean;
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);
    symmetrize(&mut cov);
    cov
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
