//! Latent draws: Gaussian reparameterisation and the Gumbel-Softmax relaxation.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{Error, Result};

/// `z = mu + exp(logsigma) * eps` for a given standard-normal draw `eps`.
pub fn reparameterize(mu: ArrayView2<'_, f64>, logsigma: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Array2<f64> {
    Zip::from(mu)
        .and(logsigma)
        .and(eps)
        .map_collect(|&m, &ls, &e| m + ls.exp() * e)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Draws `eps` and returns `(z, eps)`.
pub fn reparam_sample_gaussian<R: Rng + ?Sized>(
    mu: ArrayView2<'_, f64>,
    logsigma: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if mu.dim() != logsigma.dim() {
        return Err(Error::Dimension {
            context: "reparameterisation logsigma columns",
            expected: mu.ncols(),
            actual: logsigma.ncols(),
        });
    }
    let eps = standard_normal(mu.nrows(), mu.ncols(), rng);
    Ok((reparameterize(mu, logsigma, eps.view()), eps))
}

/// I.i.d. Gumbel(0, 1) draws, `-ln(-ln U)` with `U` uniform on the open interval.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    })
}

/// `softmax((logits + gumbel) / temperature)` within each consecutive group of
/// `logits.ncols() / groups` columns.
pub fn gumbel_softmax(
    logits: ArrayView2<'_, f64>,
    gumbel: ArrayView2<'_, f64>,
    groups: usize,
    temperature: f64,
) -> Result<Array2<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if groups == 0 || !logits.ncols().is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{} logits do not split into {groups} groups",
            logits.ncols()
        )));
    }
    if logits.dim() != gumbel.dim() {
        return Err(Error::Dimension {
            context: "gumbel noise columns",
            expected: logits.ncols(),
            actual: gumbel.ncols(),
        });
    }
    let k = logits.ncols() / groups;
    let mut out = Zip::from(logits)
        .and(gumbel)
        .map_collect(|&l, &g| (l + g) / temperature);
    for mut row in out.rows_mut() {
        for g in 0..groups {
            let mut block = row.slice_mut(ndarray::s![g * k..(g + 1) * k]);
            let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            block.mapv_inplace(|v| (v - max).exp());
            let total = block.sum();
            block /= total;
        }
    }
    Ok(out)
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    logits: ArrayView2<'_, f64>,
    groups: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let g = gumbel_noise(logits.nrows(), logits.ncols(), rng);
    gumbel_softmax(logits, g.view(), groups, temperature)
}
