//! Gaussian baseline generators: second-order model-X knockoffs and fixed-X
//! knockoffs, both with the equicorrelated choice of `s`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, GeneratorTag, KnockoffPair};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    cholesky_repaired, min_eigenvalue, orthonormal_columns, psd_ridge, sample_covariance, spd_inverse,
};
use crate::vae::sampling::standard_normal;

/// Below this smallest correlation eigenvalue the equicorrelated gap is taken as 0.
pub const S_CLAMP: f64 = 1e-10;

/// Equicorrelated gap `min(2 lambda_min(C), 1)` for a correlation matrix `C`.
pub fn equicorrelated_gap(correlation: ArrayView2<'_, f64>) -> f64 {
    let lmin = min_eigenvalue(correlation);
    if lmin < S_CLAMP {
        0.0
    } else {
        (2.0 * lmin).min(1.0)
    }
}

/// Equicorrelated `s` in covariance units: `s_j = gap * Sigma_jj`.
pub fn equicorrelated_s(covariance: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let sd = covariance.diag().mapv(f64::sqrt);
    if let Some(j) = sd.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroVariance { column: j });
    }
    let corr = Array2::from_shape_fn(covariance.raw_dim(), |(i, j)| covariance[[i, j]] / (sd[i] * sd[j]));
    let gap = equicorrelated_gap(corr.view());
    Ok(covariance.diag().mapv(|v| gap * v))
}

/// Mean, covariance and `s` for second-order knockoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderModel {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub s: Array1<f64>,
}

impl SecondOrderModel {
    /// Sample mean and covariance of `data`.
    pub fn fit(data: &DataMatrix) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::Empty("second-order fit needs at least two rows".into()));
        }
        let x = data.values();
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        Self::from_moments(mean, sample_covariance(x))
    }

    /// Known moments, e.g. the true ones in a simulation.
    pub fn from_moments(mean: Array1<f64>, covariance: Array2<f64>) -> Result<Self> {
        let s = equicorrelated_s(covariance.view())?;
        Self::with_s(mean, covariance, s)
    }

    pub fn with_s(mean: Array1<f64>, covariance: Array2<f64>, s: Array1<f64>) -> Result<Self> {
        let p = mean.len();
        check_dim("covariance rows", p, covariance.nrows())?;
        check_dim("covariance columns", p, covariance.ncols())?;
        check_dim("s length", p, s.len())?;
        for i in 0..p {
            for j in 0..i {
                if (covariance[[i, j]] - covariance[[j, i]]).abs() > 1e-10 {
                    return Err(Error::Contract(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        if s.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("s must be nonnegative".into()));
        }
        let mut gap = &covariance * 2.0;
        gap.diag_mut().zip_mut_with(&s, |d, &sj| *d -= sj);
        // Feasible up to the same ridge the sampler is allowed to add.
        let scale = covariance.diag().iter().fold(1.0f64, |m, &v| m.max(v.abs()));
        let lmin = min_eigenvalue(gap.view());
        if lmin < -1e-8 * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "2 Sigma - diag(s) has eigenvalue {lmin:e}"
            )));
        }
        Ok(Self { mean, covariance, s })
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// Row-wise draw from `N(x - (x - mu) Sigma^-1 D, 2D - D Sigma^-1 D)`.
    /// Coordinates with `s_j = 0` are copied exactly.
    pub fn sample<R: Rng + ?Sized>(&self, data: &DataMatrix, rng: &mut R) -> Result<KnockoffPair> {
        check_dim("second-order knockoff width", self.p(), data.ncols())?;
        let x = data.values();
        let mut sigma = self.covariance.clone();
        let ridge = psd_ridge(sigma.view());
        sigma.diag_mut().mapv_inplace(|d| d + ridge);
        let sigma_inv = spd_inverse(sigma.view(), "covariance")?;

        // (x - mu) Sigma^-1 D
        let centered = &x - &self.mean;
        let shift = centered.dot(&sigma_inv) * &self.s;
        let mut knockoff = &x - &shift;

        let active: Vec<usize> = (0..self.p()).filter(|&j| self.s[j] > 0.0).collect();
        if !active.is_empty() {
            let k = active.len();
            let cond = Array2::from_shape_fn((k, k), |(a, b)| {
                let (i, j) = (active[a], active[b]);
                let d = if a == b { 2.0 * self.s[i] } else { 0.0 };
                d - self.s[i] * sigma_inv[[i, j]] * self.s[j]
            });
            let (l, _) = cholesky_repaired(cond.view(), "conditional knockoff covariance")?;
            let noise = standard_normal(x.nrows(), k, rng).dot(&l.t());
            for (a, &j) in active.iter().enumerate() {
                let mut col = knockoff.column_mut(j);
                col += &noise.column(a);
            }
        }
        let tag = GeneratorTag {
            name: "second-order".into(),
            seed: 0,
        };
        KnockoffPair::new(data.clone(), knockoff, tag)
    }
}

/// Fixed-X construction on unit-norm columns. The basis `U~` is tied to the
/// design it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedXModel {
    /// Euclidean norm of each original column.
    pub column_norms: Array1<f64>,
    /// Gram matrix of the unit-norm columns.
    pub gram: Array2<f64>,
    pub s: Array1<f64>,
    /// `n x p`, orthonormal columns orthogonal to the span of `X`.
    pub complement_basis: Array2<f64>,
    /// Upper factor with `C^T C = 2D - D G^-1 D`.
    pub c: Array2<f64>,
    gram_inverse: Array2<f64>,
}

impl FixedXModel {
    /// Columns are scaled to unit norm but not centred: centring would cost
    /// one dimension of the complement, which `n = 2p` designs cannot spare.
    pub fn fit<R: Rng + ?Sized>(data: &DataMatrix, rng: &mut R) -> Result<Self> {
        let (n, p) = (data.nrows(), data.ncols());
        if n < 2 * p {
            return Err(Error::Unsupported(format!(
                "fixed-X knockoffs need n >= 2p (n = {n}, p = {p}); use a model-X generator"
            )));
        }
        let x = data.values();
        let norms = x.map_axis(Axis(0), |c| c.dot(&c).sqrt());
        if let Some(j) = norms.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ZeroVariance { column: j });
        }
        let xn = &x / &norms;
        let gram = xn.t().dot(&xn);
        let lmin = min_eigenvalue(gram.view());
        if lmin < S_CLAMP {
            return Err(Error::RankDeficient(format!(
                "fixed-X design has smallest Gram eigenvalue {lmin:e}"
            )));
        }
        let gram_inverse = spd_inverse(gram.view(), "Gram matrix")?;
        let s = Array1::from_elem(p, equicorrelated_gap(gram.view()));
        let v = Array2::from_shape_fn((p, p), |(i, j)| {
            let d = if i == j { 2.0 * s[i] } else { 0.0 };
            d - s[i] * gram_inverse[[i, j]] * s[j]
        });
        let (l, _) = cholesky_repaired(v.view(), "fixed-X knockoff covariance")?;
        let c = l.t().to_owned();

        let q = orthonormal_columns(xn.view());
        let mut r = standard_normal(n, p, rng);
        // Two projection passes keep U~^T X at rounding level.
        for _ in 0..2 {
            let proj = q.dot(&q.t().dot(&r));
            r -= &proj;
        }
        let mut basis = orthonormal_columns(r.view());
        let proj = q.dot(&q.t().dot(&basis));
        basis -= &proj;

        Ok(Self {
            column_norms: norms,
            gram,
            s,
            complement_basis: basis,
            c,
            gram_inverse,
        })
    }

    /// `s` rescaled to the original column norms, so that `X~^T X = X^T X - diag` holds in
    /// data units.
    pub fn s_in_data_units(&self) -> Array1<f64> {
        &self.s * &self.column_norms.mapv(|v| v * v)
    }

    /// `X~ = X (I - G^-1 D) + U~ C` on unit-norm columns, returned in data units.
    pub fn sample(&self, data: &DataMatrix) -> Result<KnockoffPair> {
        let p = self.s.len();
        check_dim("fixed-X knockoff width", p, data.ncols())?;
        check_dim("fixed-X knockoff rows", self.complement_basis.nrows(), data.nrows())?;
        let xn = &data.values() / &self.column_norms;
        let mut a = -(&self.gram_inverse * &self.s);
        a.diag_mut().mapv_inplace(|d| d + 1.0);
        let kn = xn.dot(&a) + self.complement_basis.dot(&self.c);
        let mut knockoff = kn * &self.column_norms;
        // s_j = 0 gives an exact copy; avoid rounding noise there.
        for j in (0..p).filter(|&j| self.s[j] == 0.0) {
            knockoff.column_mut(j).assign(&data.values().column(j));
        }
        let tag = GeneratorTag {
            name: "fixed-x".into(),
            seed: 0,
        };
        KnockoffPair::new(data.clone(), knockoff, tag)
    }
}
