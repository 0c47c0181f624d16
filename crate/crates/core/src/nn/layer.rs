use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
    /// Softmax applied independently to consecutive blocks of `width / groups` units.
    GroupSoftmax {
        groups: usize,
    },
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
            Activation::GroupSoftmax { .. } => "softmax",
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        if let Activation::GroupSoftmax { groups } = *self {
            if groups == 0 || !width.is_multiple_of(groups) {
                return Err(Error::Config(format!(
                    "softmax over {groups} groups does not divide layer width {width}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn apply(&self, z: &mut Array2<f64>) {
        match *self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Linear => {}
            Activation::GroupSoftmax { groups } => {
                let k = z.ncols() / groups;
                for mut row in z.rows_mut() {
                    for g in 0..groups {
                        let mut block = row.slice_mut(ndarray::s![g * k..(g + 1) * k]);
                        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        block.mapv_inplace(|v| (v - max).exp());
                        let total = block.sum();
                        block /= total;
                    }
                }
            }
        }
    }

    /// Gradient with respect to the pre-activation, given the activation output
    /// and the gradient with respect to that output.
    pub(crate) fn backprop(&self, output: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Array2<f64> {
        match *self {
            Activation::Tanh => Zip::from(output).and(upstream).map_collect(|&a, &g| g * (1.0 - a * a)),
            Activation::Relu => Zip::from(output)
                .and(upstream)
                .map_collect(|&a, &g| if a > 0.0 { g } else { 0.0 }),
            Activation::Sigmoid => Zip::from(output).and(upstream).map_collect(|&a, &g| g * a * (1.0 - a)),
            Activation::Linear => upstream.to_owned(),
            Activation::GroupSoftmax { groups } => {
                let k = output.ncols() / groups;
                let mut dz = Array2::zeros(output.raw_dim());
                for ((a, g), mut d) in output.rows().into_iter().zip(upstream.rows()).zip(dz.rows_mut()) {
                    for block in 0..groups {
                        let range = block * k..(block + 1) * k;
                        let inner: f64 = (range.clone()).map(|c| a[c] * g[c]).sum();
                        for c in range {
                            d[c] = a[c] * (g[c] - inner);
                        }
                    }
                }
                dz
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Fully connected layer `y = activation(x W^T + b)` with an L2 weight penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
    pub(crate) activation: Activation,
    pub(crate) l2_penalty: f64,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation, l2_penalty: f64) -> Result<Self> {
        crate::error::check_dim("dense bias", weights.nrows(), bias.len())?;
        if !(l2_penalty >= 0.0) {
            return Err(Error::Config(format!(
                "l2 penalty must be nonnegative, got {l2_penalty}"
            )));
        }
        activation.validate(weights.nrows())?;
        Ok(Self {
            weights,
            bias,
            activation,
            l2_penalty,
        })
    }

    /// Fan-in scaled uniform initialisation, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        l2_penalty: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let limit = (3.0 / inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weights = Array2::from_shape_simple_fn((outputs, inputs), || dist.sample(rng));
        Self::new(weights, Array1::zeros(outputs), activation, l2_penalty)
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn l2_penalty(&self) -> f64 {
        self.l2_penalty
    }

    pub fn l2_term(&self) -> f64 {
        self.l2_penalty * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub(crate) fn forward(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights.t());
        z += &self.bias;
        self.activation.apply(&mut z);
        z
    }

    /// Returns `(dW, db, dinput)`; `dW` includes the L2 term.
    pub(crate) fn backward(
        &self,
        input: ArrayView2<'_, f64>,
        output: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let dz = self.activation.backprop(output, upstream);
        let mut dw = dz.t().dot(&input);
        if self.l2_penalty > 0.0 {
            dw.scaled_add(2.0 * self.l2_penalty, &self.weights);
        }
        let db = dz.sum_axis(Axis(0));
        let dinput = dz.dot(&self.weights);
        (dw, db, dinput)
    }
}
