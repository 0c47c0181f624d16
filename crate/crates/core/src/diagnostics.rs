//! Knockoff quality checks: swap-moment gaps, residual independence and the
//! exact log-density-ratio statistic for Gaussian designs with known moments.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::KnockoffPair;
use crate::error::{check_dim, Error, Result};
use crate::linalg::spd_inverse;

/// Gaps are flagged when they exceed this many Monte-Carlo standard errors.
pub const FLAG_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub value: f64,
    pub standard_error: f64,
}

impl Gap {
    /// `value / standard_error`; exact agreement with zero error counts as 0.
    pub fn z(&self) -> f64 {
        if self.value == 0.0 {
            0.0
        } else {
            self.value / self.standard_error
        }
    }

    pub fn flagged(&self) -> bool {
        self.z() > FLAG_SE
    }
}

/// Mean and standard error of the per-row differences `a - b`, as an absolute gap.
fn paired_gap(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> Gap {
    let d: Vec<f64> = a.zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Gap {
        value: mean.abs(),
        standard_error: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapDiagnostics {
    /// `|mean(X_j) - mean(X~_j)|` per coordinate.
    pub mean_gap: Vec<Gap>,
    /// `|cov(X_i, X_j) - cov(X~_i, X~_j)|`, upper triangle including the diagonal, row-major.
    pub covariance_gap: Vec<Gap>,
    /// `|cov(X_i, X~_j) - cov(X~_i, X_j)|` for `i < j`, row-major.
    pub cross_symmetry_gap: Vec<Gap>,
    /// `|cov(X_i, X~_j) - cov(X_i, X_j)|` for `i < j`, row-major.
    pub cross_offdiagonal_gap: Vec<Gap>,
}

fn max_of(gaps: &[Gap]) -> f64 {
    gaps.iter().fold(0.0, |m, g| m.max(g.value))
}

impl SwapDiagnostics {
    pub fn max_mean_gap(&self) -> f64 {
        max_of(&self.mean_gap)
    }

    pub fn max_covariance_gap(&self) -> f64 {
        max_of(&self.covariance_gap)
    }

    pub fn max_cross_gap(&self) -> f64 {
        max_of(&self.cross_symmetry_gap).max(max_of(&self.cross_offdiagonal_gap))
    }

    pub fn mean_flags(&self) -> usize {
        self.mean_gap.iter().filter(|g| g.flagged()).count()
    }

    pub fn covariance_flags(&self) -> usize {
        self.covariance_gap.iter().filter(|g| g.flagged()).count()
    }

    pub fn cross_flags(&self) -> usize {
        self.cross_symmetry_gap
            .iter()
            .chain(&self.cross_offdiagonal_gap)
            .filter(|g| g.flagged())
            .count()
    }

    pub fn any_flag(&self) -> bool {
        self.mean_flags() + self.covariance_flags() + self.cross_flags() > 0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "max_gap", "flags", "comparisons"])?;
        for (name, gaps) in [
            ("mean", &self.mean_gap),
            ("covariance", &self.covariance_gap),
            ("cross_symmetry", &self.cross_symmetry_gap),
            ("cross_offdiagonal", &self.cross_offdiagonal_gap),
        ] {
            let flags = gaps.iter().filter(|g| g.flagged()).count();
            w.write_record([
                name.to_string(),
                max_of(gaps).to_string(),
                flags.to_string(),
                gaps.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Necessary moment conditions of swap exchangeability, each with a paired
/// Monte-Carlo standard error.
pub fn swap_moment_report(pair: &KnockoffPair) -> SwapDiagnostics {
    let x = pair.original.values();
    let k = pair.knockoff.values();
    let p = x.ncols();
    let xc = &x - &x.mean_axis(Axis(0)).expect("nonempty");
    let kc = &k - &k.mean_axis(Axis(0)).expect("nonempty");
    let prod =
        |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };

    let mean_gap = (0..p)
        .map(|j| paired_gap(x.column(j).iter().copied(), k.column(j).iter().copied()))
        .collect();
    let mut covariance_gap = Vec::new();
    let mut cross_symmetry_gap = Vec::new();
    let mut cross_offdiagonal_gap = Vec::new();
    for i in 0..p {
        for j in i..p {
            let a = prod(xc.column(i), xc.column(j));
            let b = prod(kc.column(i), kc.column(j));
            covariance_gap.push(paired_gap(a.into_iter(), b.into_iter()));
            if j > i {
                let cross_ij = prod(xc.column(i), kc.column(j));
                let cross_ji = prod(kc.column(i), xc.column(j));
                let orig = prod(xc.column(i), xc.column(j));
                cross_symmetry_gap.push(paired_gap(cross_ij.iter().copied(), cross_ji.into_iter()));
                cross_offdiagonal_gap.push(paired_gap(cross_ij.into_iter(), orig.into_iter()));
            }
        }
    }
    SwapDiagnostics {
        mean_gap,
        covariance_gap,
        cross_symmetry_gap,
        cross_offdiagonal_gap,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCorrelation {
    pub correlation: Array2<f64>,
    /// Largest absolute off-diagonal entry.
    pub max_abs_offdiagonal: f64,
    /// `1 / sqrt(n)`, the null standard error of one entry.
    pub standard_error: f64,
}

/// Correlation matrix of `x - fitted`. Columns with zero residual variance get
/// zero correlation with everything else.
pub fn residual_correlation(x: ArrayView2<'_, f64>, fitted: ArrayView2<'_, f64>) -> Result<ResidualCorrelation> {
    check_dim("residual rows", x.nrows(), fitted.nrows())?;
    check_dim("residual columns", x.ncols(), fitted.ncols())?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Empty("residual correlation needs at least two rows".into()));
    }
    let r = &x - &fitted;
    let rc = &r - &r.mean_axis(Axis(0)).expect("nonempty");
    let cov = rc.t().dot(&rc);
    let p = x.ncols();
    let sd = cov.diag().mapv(f64::sqrt);
    let correlation = Array2::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            1.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            cov[[i, j]] / (sd[i] * sd[j])
        } else {
            0.0
        }
    });
    let mut max_abs = 0.0f64;
    for i in 0..p {
        for j in 0..i {
            max_abs = max_abs.max(correlation[[i, j]].abs());
        }
    }
    Ok(ResidualCorrelation {
        correlation,
        max_abs_offdiagonal: max_abs,
        standard_error: 1.0 / (n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlHat {
    /// `sum_i log f(x_i, x~_i) - log f((x_i, x~_i) swapped at j)` per coordinate.
    pub kl: Array1<f64>,
    /// `sqrt(n) * sd` of the per-row terms: the standard error of the sum.
    pub standard_error: Array1<f64>,
}

/// Log density ratio of each row against its coordinate-`j` swap under the
/// joint Gaussian of `(X, X~)` with mean `(mu, mu)`, blocks `Sigma` on the
/// diagonal and `Sigma - diag(s)` off it. Coordinates with `s_j = 0` have
/// `X~_j = X_j` under the model, so their knockoff is left out of the joint and
/// their statistic is 0.
pub fn gaussian_kl_hat(
    x: ArrayView2<'_, f64>,
    x_knockoff: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    sigma: ArrayView2<'_, f64>,
    s: ArrayView1<'_, f64>,
) -> Result<KlHat> {
    let (n, p) = x.dim();
    check_dim("knockoff rows", n, x_knockoff.nrows())?;
    check_dim("knockoff columns", p, x_knockoff.ncols())?;
    check_dim("mean length", p, mu.len())?;
    check_dim("covariance size", p, sigma.nrows())?;
    check_dim("covariance size", p, sigma.ncols())?;
    check_dim("s length", p, s.len())?;
    let active: Vec<usize> = (0..p).filter(|&j| s[j] > 0.0).collect();
    let k = active.len();
    let dim = p + k;
    let joint = Array2::from_shape_fn((dim, dim), |(a, b)| {
        let idx = |t: usize| if t < p { (t, false) } else { (active[t - p], true) };
        let ((i, ki), (j, kj)) = (idx(a), idx(b));
        let mut v = sigma[[i, j]];
        if ki != kj && i == j {
            v -= s[i];
        }
        v
    });
    let precision = spd_inverse(joint.view(), "joint covariance of (X, X~)")?;

    let mut kl = Array1::zeros(p);
    let mut se = Array1::zeros(p);
    let quad = |v: &Array1<f64>| v.dot(&precision.dot(v));
    for (a, &j) in active.iter().enumerate() {
        let mut terms = Vec::with_capacity(n);
        for r in 0..n {
            let mut v = Array1::zeros(dim);
            for t in 0..p {
                v[t] = x[[r, t]] - mu[t];
            }
            for (b, &t) in active.iter().enumerate() {
                v[p + b] = x_knockoff[[r, t]] - mu[t];
            }
            let mut swapped = v.clone();
            swapped.swap(j, p + a);
            // log f(v) - log f(swapped); the normalising constants cancel.
            terms.push(0.5 * (quad(&swapped) - quad(&v)));
        }
        let total: f64 = terms.iter().sum();
        let mean = total / n as f64;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        kl[j] = total;
        se[j] = (var * n as f64).sqrt();
    }
    Ok(KlHat { kl, standard_error: se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataMatrix, GeneratorTag};
    use crate::gaussian::SecondOrderModel;
    use crate::linalg::equicorrelation;
    use crate::rng::rng_from_seed;
    use crate::vae::sampling::standard_normal;

    fn pair(x: Array2<f64>, k: Array2<f64>) -> KnockoffPair {
        let tag = GeneratorTag {
            name: "test".into(),
            seed: 0,
        };
        KnockoffPair::new(DataMatrix::continuous(x).unwrap(), k, tag).unwrap()
    }

    fn correlated(n: usize, p: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let sigma = equicorrelation(p, 0.3);
        let l = crate::linalg::cholesky_lower(sigma.view()).unwrap();
        (standard_normal(n, p, &mut rng_from_seed(seed)).dot(&l.t()), sigma)
    }

    #[test]
    fn identical_copy_has_zero_gaps() {
        let (x, _) = correlated(100, 4, 1);
        let report = swap_moment_report(&pair(x.clone(), x));
        assert_eq!(report.max_mean_gap(), 0.0);
        assert_eq!(report.max_covariance_gap(), 0.0);
        assert!(!report.mean_gap.iter().chain(&report.covariance_gap).any(Gap::flagged));
    }

    #[test]
    fn exact_second_order_knockoffs_pass() {
        let (x, sigma) = correlated(10_000, 3, 2);
        let model = SecondOrderModel::from_moments(Array1::zeros(3), sigma).unwrap();
        let data = DataMatrix::continuous(x).unwrap();
        let p = model.sample(&data, &mut rng_from_seed(3)).unwrap();
        let report = swap_moment_report(&p);
        assert!(!report.any_flag(), "{report:?}");
    }

    #[test]
    fn permuted_columns_are_flagged() {
        let mut rng = rng_from_seed(4);
        let mut x = standard_normal(2000, 3, &mut rng);
        // Unequal variances and one correlated pair.
        x.column_mut(0).mapv_inplace(|v| 3.0 * v);
        let c0 = x.column(0).to_owned();
        x.column_mut(1).zip_mut_with(&c0, |v, a| *v += 0.5 * a);
        let k = x.select(Axis(1), &[2, 0, 1]);
        let report = swap_moment_report(&pair(x, k));
        assert!(report.covariance_flags() > 0);
    }

    #[test]
    fn residual_correlation_of_independent_noise_is_small() {
        let n = 10_000;
        let noise = standard_normal(n, 4, &mut rng_from_seed(5));
        let fitted = Array2::zeros((n, 4));
        let rc = residual_correlation(noise.view(), fitted.view()).unwrap();
        assert!(
            rc.max_abs_offdiagonal < 3.0 * rc.standard_error,
            "{}",
            rc.max_abs_offdiagonal
        );
    }

    #[test]
    fn kl_hat_is_antisymmetric_and_zero_for_copies() {
        let (x, sigma) = correlated(200, 3, 6);
        let s = Array1::from_vec(vec![0.5, 0.0, 0.7]);
        let model = SecondOrderModel::with_s(Array1::zeros(3), sigma.clone(), s.clone()).unwrap();
        let data = DataMatrix::continuous(x.clone()).unwrap();
        let k = model
            .sample(&data, &mut rng_from_seed(7))
            .unwrap()
            .knockoff
            .into_values();
        let mu = Array1::zeros(3);
        let fwd = gaussian_kl_hat(x.view(), k.view(), mu.view(), sigma.view(), s.view()).unwrap();
        assert_eq!(fwd.kl[1], 0.0);
        for j in [0, 2] {
            let mut xs = x.clone();
            let mut ks = k.clone();
            xs.column_mut(j).assign(&k.column(j));
            ks.column_mut(j).assign(&x.column(j));
            let back = gaussian_kl_hat(xs.view(), ks.view(), mu.view(), sigma.view(), s.view()).unwrap();
            assert_eq!(back.kl[j], -fwd.kl[j]);
        }
    }

    #[test]
    fn kl_hat_flags_mismatched_knockoffs() {
        let (x, sigma) = correlated(500, 3, 8);
        let s = Array1::from_elem(3, 0.6);
        let mu = Array1::zeros(3);
        // An exact copy swaps to itself and scores 0, so shift it.
        let k = &x + 1.5;
        let kl = gaussian_kl_hat(x.view(), k.view(), mu.view(), sigma.view(), s.view()).unwrap();
        assert!(kl.kl.iter().zip(&kl.standard_error).any(|(v, se)| v.abs() > 3.0 * se));
    }

    #[test]
    fn singular_joint_is_an_error() {
        let sigma = Array2::eye(2);
        let s = Array1::from_elem(2, 2.0);
        let x = Array2::zeros((3, 2));
        let err = gaussian_kl_hat(x.view(), x.view(), Array1::zeros(2).view(), sigma.view(), s.view());
        assert!(matches!(err, Err(Error::NotPositiveDefinite(_))));
    }
}
