//! Seeded simulation designs and outcomes.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::lasso::Family;
use crate::linalg::{cholesky_lower, equicorrelation};

/// How the Cholesky factor `L` (`L L^T = C`) mixes the noise columns.
///
/// `Upper` forms `Z = U L^T`, whose rows have covariance proportional to `C`.
/// `Lower` forms `Z = U L`, whose rows have covariance proportional to `L^T L`;
/// with 200 columns this concentrates correlation in the trailing columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingFactor {
    Lower,
    Upper,
}

fn mix(u: &Array2<f64>, off_diagonal: f64, factor: MixingFactor) -> Result<Array2<f64>> {
    let c = equicorrelation(u.ncols(), off_diagonal);
    let l = cholesky_lower(c.view())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("equicorrelation({off_diagonal})")))?;
    Ok(match factor {
        MixingFactor::Lower => u.dot(&l),
        MixingFactor::Upper => u.dot(&l.t()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting1Options {
    pub off_diagonal: f64,
    pub factor: MixingFactor,
}

impl Default for Setting1Options {
    fn default() -> Self {
        Self {
            off_diagonal: 0.1,
            factor: MixingFactor::Lower,
        }
    }
}

/// Continuous non-Gaussian design: uniform noise mixed by an equicorrelation
/// factor, pairs of columns transformed non-linearly, each column rescaled to
/// `[0, 1]`. Column `2i` is `Z[4i] + 0.5 Z[4i+1]^3`; column `2i+1` is
/// `Z[4i+2] - 0.5 Z[4i+2]^2 + 0.5 exp(Z[4i+3])`.
pub fn setting1<R: Rng + ?Sized>(n: usize, p: usize, opts: &Setting1Options, rng: &mut R) -> Result<DataMatrix> {
    if p == 0 || !p.is_multiple_of(2) || n < 2 {
        return Err(Error::Config(format!(
            "setting 1 needs even p > 0 and n >= 2 (got n={n}, p={p})"
        )));
    }
    let u = Array2::from_shape_simple_fn((n, 2 * p), || rng.random::<f64>());
    let z = mix(&u, opts.off_diagonal, opts.factor)?;
    let mut x = Array2::zeros((n, p));
    for i in 0..p / 2 {
        for r in 0..n {
            x[[r, 2 * i]] = z[[r, 4 * i]] + 0.5 * z[[r, 4 * i + 1]].powi(3);
            let a = z[[r, 4 * i + 2]];
            x[[r, 2 * i + 1]] = a - 0.5 * a * a + 0.5 * z[[r, 4 * i + 3]].exp();
        }
    }
    for mut col in x.axis_iter_mut(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if !(span > 0.0) {
            return Err(Error::ZeroVariance { column: 0 });
        }
        col.mapv_inplace(|v| (v - lo) / span);
    }
    DataMatrix::continuous(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting2Options {
    pub off_diagonal: f64,
    pub factor: MixingFactor,
}

impl Default for Setting2Options {
    fn default() -> Self {
        Self {
            off_diagonal: 0.1,
            factor: MixingFactor::Upper,
        }
    }
}

/// Latent Gaussian matrix behind setting 2, rows `N(0, C)` under the upper factor.
pub fn setting2_latent<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    opts: &Setting2Options,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if p == 0 || n < 2 {
        return Err(Error::Config(format!(
            "setting 2 needs p > 0 and n >= 2 (got n={n}, p={p})"
        )));
    }
    let u = Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal));
    mix(&u, opts.off_diagonal, opts.factor)
}

/// Binary design `1(Z > 0)` over the setting-2 latent matrix.
pub fn setting2<R: Rng + ?Sized>(n: usize, p: usize, opts: &Setting2Options, rng: &mut R) -> Result<DataMatrix> {
    let z = setting2_latent(n, p, opts, rng)?;
    DataMatrix::binary(z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// The first `m` columns.
    Leading,
    /// `m` columns drawn without replacement, in ascending order.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub y: Array1<f64>,
    pub beta: Array1<f64>,
    /// Zero-based indices of the nonzero coefficients, ascending.
    pub truth: Vec<usize>,
}

/// Linear signal with coefficients `+rho, -rho, +rho, ...` on the support.
/// Gaussian: `y = X beta + N(0, 1)`; binomial: `y ~ Bernoulli(1 / (1 + exp(-X beta)))`.
pub fn generate_outcome<R: Rng + ?Sized>(
    x: &DataMatrix,
    m: usize,
    rho: f64,
    family: Family,
    support: Support,
    rng: &mut R,
) -> Result<Outcome> {
    let p = x.ncols();
    if m > p {
        return Err(Error::Config(format!("{m} signals requested from {p} columns")));
    }
    if !(rho >= 0.0) {
        return Err(Error::Config(format!(
            "signal magnitude must be nonnegative, got {rho}"
        )));
    }
    let mut truth: Vec<usize> = match support {
        Support::Leading => (0..m).collect(),
        Support::Random => sample(rng, p, m).into_vec(),
    };
    truth.sort_unstable();
    let mut beta = Array1::zeros(p);
    for (k, &j) in truth.iter().enumerate() {
        beta[j] = if k % 2 == 0 { rho } else { -rho };
    }
    let eta = x.values().dot(&beta);
    let y = match family {
        Family::Gaussian => eta.mapv(|e| e + rng.sample::<f64, _>(StandardNormal)),
        Family::Binomial => eta.mapv(|e| {
            let prob = 1.0 / (1.0 + (-e).exp());
            if rng.random::<f64>() < prob {
                1.0
            } else {
                0.0
            }
        }),
    };
    Ok(Outcome { y, beta, truth })
}

/// Support indices (one-based, matching column names) and coefficients.
pub fn write_truth_csv<W: Write>(out: W, names: &[String], outcome: &Outcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "variable", "beta"])?;
    for &j in &outcome.truth {
        w.write_record([(j + 1).to_string(), names[j].clone(), outcome.beta[j].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_covariance;
    use crate::rng::rng_from_seed;

    fn correlations(x: &Array2<f64>) -> Array2<f64> {
        let cov = sample_covariance(x.view());
        let sd = cov.diag().mapv(f64::sqrt);
        Array2::from_shape_fn(cov.raw_dim(), |(i, j)| cov[[i, j]] / (sd[i] * sd[j]))
    }

    #[test]
    fn setting1_columns_span_unit_interval() {
        let x = setting1(200, 100, &Setting1Options::default(), &mut rng_from_seed(1)).unwrap();
        for col in x.values().columns() {
            assert_eq!(col.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(col.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn setting1_without_mixing_is_uncorrelated() {
        let n = 2000;
        let opts = Setting1Options {
            off_diagonal: 0.0,
            ..Default::default()
        };
        let x = setting1(n, 20, &opts, &mut rng_from_seed(2)).unwrap();
        let c = correlations(&x.values().to_owned());
        let limit = 3.0 / (n as f64).sqrt();
        let mut over = 0;
        for i in 0..20 {
            for j in 0..i {
                if c[[i, j]].abs() > limit {
                    over += 1;
                }
            }
        }
        // 190 pairs; about 0.5 expected beyond 3 s.e.
        assert!(over <= 3, "{over} pairs beyond 3 s.e.");
    }

    #[test]
    fn setting1_correlation_profile() {
        let x = setting1(200, 100, &Setting1Options::default(), &mut rng_from_seed(3)).unwrap();
        let c = correlations(&x.values().to_owned());
        let mut off = Vec::new();
        for i in 0..100 {
            for j in 0..i {
                off.push(c[[i, j]]);
            }
        }
        let mean_abs = off.iter().map(|v| v.abs()).sum::<f64>() / off.len() as f64;
        let lo = off.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((mean_abs - 0.07).abs() <= 0.03, "mean |corr| {mean_abs}");
        assert!(lo > -0.3 && hi < 0.6 + 0.1, "range ({lo}, {hi})");
    }

    #[test]
    fn setting2_is_binary_and_balanced() {
        let n = 200;
        let x = setting2(n, 100, &Setting2Options::default(), &mut rng_from_seed(4)).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0 || v == 1.0));
        let limit = 3.0 * (0.25 / n as f64).sqrt();
        let outside = x.column_means().iter().filter(|m| (*m - 0.5).abs() > limit).count();
        assert!(outside <= 2, "{outside} column means beyond 3 s.e.");
    }

    #[test]
    fn setting2_adjacent_correlation_matches_arcsine_law() {
        let n = 20_000;
        let x = setting2(n, 10, &Setting2Options::default(), &mut rng_from_seed(5)).unwrap();
        let c = correlations(&x.values().to_owned());
        let expected = 2.0 / std::f64::consts::PI * 0.1f64.asin();
        let mean_adj = (0..9).map(|j| c[[j, j + 1]]).sum::<f64>() / 9.0;
        // Each estimate has s.e. about 1/sqrt(n); the average of 9 is tighter.
        assert!(
            (mean_adj - expected).abs() < 3.0 / (n as f64).sqrt(),
            "{mean_adj} vs {expected}"
        );
    }

    #[test]
    fn outcome_signs_alternate_from_plus() {
        let x = DataMatrix::continuous(Array2::eye(4)).unwrap();
        let out = generate_outcome(&x, 3, 2.0, Family::Gaussian, Support::Leading, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.truth, vec![0, 1, 2]);
        assert_eq!(out.beta.to_vec(), vec![2.0, -2.0, 2.0, 0.0]);
        let random = generate_outcome(&x, 2, 1.0, Family::Binomial, Support::Random, &mut rng_from_seed(2)).unwrap();
        assert_eq!(random.truth.len(), 2);
        assert!(random.y.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(generate_outcome(&x, 5, 1.0, Family::Gaussian, Support::Leading, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn identity_design_mean_is_signed_difference() {
        // E[y] = x1 - x2: average many draws at fixed X.
        let x = DataMatrix::continuous(ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let mut rng = rng_from_seed(3);
        let reps = 20_000;
        let mut total = Array1::<f64>::zeros(3);
        for _ in 0..reps {
            total += &generate_outcome(&x, 2, 1.0, Family::Gaussian, Support::Leading, &mut rng)
                .unwrap()
                .y;
        }
        let mean = total / reps as f64;
        for (got, want) in mean.iter().zip([1.0, -1.0, 0.0]) {
            assert!((got - want).abs() < 4.0 / (reps as f64).sqrt());
        }
    }

    #[test]
    fn setting2_signal_to_noise_near_two_rho_squared() {
        let rho = 1.0;
        let mut rng = rng_from_seed(6);
        let x = setting2(20_000, 100, &Setting2Options::default(), &mut rng).unwrap();
        let out = generate_outcome(&x, 10, rho, Family::Gaussian, Support::Leading, &mut rng).unwrap();
        let signal = x.values().dot(&out.beta);
        let m = signal.mean().unwrap();
        let var = signal.mapv(|v| (v - m).powi(2)).mean().unwrap();
        assert!((var / (2.0 * rho * rho) - 1.0).abs() < 0.3, "snr {var}");
    }

    #[test]
    fn same_seed_same_design() {
        let a = setting1(20, 10, &Setting1Options::default(), &mut rng_from_seed(9)).unwrap();
        let b = setting1(20, 10, &Setting1Options::default(), &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }
}
