use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Batch normalisation with a learned affine transform.
///
/// Train mode normalises with the batch statistics (biased variance); eval mode
/// uses the running estimates, which training updates as
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub(crate) running_mean: Array1<f64>,
    pub(crate) running_var: Array1<f64>,
    pub(crate) scale: Array1<f64>,
    pub(crate) shift: Array1<f64>,
    pub(crate) momentum: f64,
    pub(crate) epsilon: f64,
}

/// Per-batch quantities kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_state(
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
        scale: Array1<f64>,
        shift: Array1<f64>,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let width = running_mean.len();
        for (what, len) in [
            ("running_var", running_var.len()),
            ("scale", scale.len()),
            ("shift", shift.len()),
        ] {
            if len != width {
                return Err(Error::Config(format!(
                    "batch-norm {what} has length {len}, expected {width}"
                )));
            }
        }
        if running_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("batch-norm running variance must be positive".into()));
        }
        if !(momentum > 0.0 && momentum < 1.0) || !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "bad batch-norm momentum {momentum} / epsilon {epsilon}"
            )));
        }
        Ok(Self {
            running_mean,
            running_var,
            scale,
            shift,
            momentum,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }

    pub fn running_mean(&self) -> &Array1<f64> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Array1<f64> {
        &self.running_var
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub(crate) fn forward_train(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, BatchStats) {
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let normalized = centered * &inv_std;
        let out = &normalized * &self.scale + &self.shift;
        (
            out,
            BatchStats {
                normalized,
                inv_std,
                mean,
                var,
            },
        )
    }

    pub(crate) fn forward_eval(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (gain, offset) = self.eval_affine();
        &x * &gain + &offset
    }

    /// Eval mode is `y = gain * x + offset` per unit; returns `(gain, offset)`.
    pub fn eval_affine(&self) -> (Array1<f64>, Array1<f64>) {
        let gain = &self.scale / &self.running_var.mapv(|v| (v + self.epsilon).sqrt());
        let offset = &self.shift - &(&gain * &self.running_mean);
        (gain, offset)
    }

    /// Returns `(dscale, dshift, dinput)`.
    pub(crate) fn backward(
        &self,
        stats: &BatchStats,
        upstream: ArrayView2<'_, f64>,
    ) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let b = upstream.nrows() as f64;
        let dshift = upstream.sum_axis(Axis(0));
        let dscale = (&upstream * &stats.normalized).sum_axis(Axis(0));
        let dnorm = &upstream * &self.scale;
        let sum_dnorm = dnorm.sum_axis(Axis(0));
        let sum_dnorm_norm = (&dnorm * &stats.normalized).sum_axis(Axis(0));
        let dinput = (&dnorm * b - &sum_dnorm - &(&stats.normalized * &sum_dnorm_norm)) * &(&stats.inv_std / b);
        (dscale, dshift, dinput)
    }

    pub(crate) fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * m + &stats.mean * (1.0 - m);
        self.running_var = &self.running_var * m + &stats.var * (1.0 - m);
    }
}
