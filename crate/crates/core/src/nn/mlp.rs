use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNorm, BatchStats};
use super::layer::{Activation, DenseLayer};
use crate::error::{check_dim, Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNorm),
}

impl Layer {
    fn input_width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.inputs(),
            Layer::BatchNorm(b) => b.width(),
        }
    }

    fn output_width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.outputs(),
            Layer::BatchNorm(b) => b.width(),
        }
    }
}

/// A stack of dense and batch-norm layers.
///
/// Every parameter mutation stamps the model with a fresh generation number;
/// activations remember the generation they were computed under so that a
/// backward pass against stale activations is rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Everything a forward pass computed: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations {
    mode: Mode,
    generation: u64,
    values: Vec<Array2<f64>>,
    batch_stats: Vec<Option<BatchStats>>,
}

impl Activations {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.values.last().expect("at least the input").view()
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.values.pop().expect("at least the input")
    }

    pub fn layer_values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGradient {
    Dense { weights: Array2<f64>, bias: Array1<f64> },
    BatchNorm { scale: Array1<f64>, shift: Array1<f64> },
}

/// Parameter gradients in model order, plus the gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Flat views in the same order as [`MlpModel::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for g in &self.layers {
            match g {
                LayerGradient::Dense { weights, bias } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGradient::BatchNorm { scale, shift } => {
                    out.push(scale.as_slice().expect("standard layout"));
                    out.push(shift.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("adjacent layer widths", pair[0].output_width(), pair[1].input_width())?;
        }
        Ok(Self {
            layers,
            generation: next_generation(),
        })
    }

    /// Dense stack `widths[0] -> widths[1] -> ...`; hidden layers share one activation
    /// and penalty, the last layer gets `output` and `output_l2`. A batch-norm layer is
    /// inserted before the output layer when `batch_norm_before_output` is set.
    pub fn dense_stack<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        hidden_l2: f64,
        output: Activation,
        output_l2: f64,
        batch_norm_before_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("need an input and an output width".into()));
        }
        let mut layers = Vec::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            if i == last {
                if batch_norm_before_output {
                    layers.push(Layer::BatchNorm(BatchNorm::new(pair[0])));
                }
                layers.push(Layer::Dense(DenseLayer::init(
                    pair[0], pair[1], output, output_l2, rng,
                )?));
            } else {
                layers.push(Layer::Dense(DenseLayer::init(
                    pair[0], pair[1], hidden, hidden_l2, rng,
                )?));
            }
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weights.len() + d.bias.len(),
                Layer::BatchNorm(b) => 2 * b.width(),
            })
            .sum()
    }

    /// `sum_l l2_l * ||W_l||^2` over dense layers.
    pub fn l2_term(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.l2_term(),
                Layer::BatchNorm(_) => 0.0,
            })
            .sum()
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>, mode: Mode) -> Result<Activations> {
        check_dim("model input width", self.input_width(), batch.ncols())?;
        if batch.nrows() == 0 {
            return Err(Error::Empty("forward pass on an empty batch".into()));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        values.push(batch.to_owned());
        for layer in &self.layers {
            let input = values.last().expect("input pushed").view();
            let (out, stats) = match (layer, mode) {
                (Layer::Dense(d), _) => (d.forward(input), None),
                (Layer::BatchNorm(b), Mode::Train) => {
                    let (out, stats) = b.forward_train(input);
                    (out, Some(stats))
                }
                (Layer::BatchNorm(b), Mode::Eval) => (b.forward_eval(input), None),
            };
            values.push(out);
            batch_stats.push(stats);
        }
        Ok(Activations {
            mode,
            generation: self.generation,
            values,
            batch_stats,
        })
    }

    /// Output only, in eval mode.
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch, Mode::Eval)?.into_output())
    }

    pub fn backward(&self, activations: &Activations, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
        if activations.mode != Mode::Train {
            return Err(Error::Contract(
                "backward needs activations from a train-mode forward pass".into(),
            ));
        }
        if activations.generation != self.generation || activations.values.len() != self.layers.len() + 1 {
            return Err(Error::Contract(
                "activations were computed with different model parameters".into(),
            ));
        }
        let output = activations.output();
        if output.dim() != upstream.dim() {
            return Err(Error::Contract(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                output.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = activations.values[i].view();
            let out = activations.values[i + 1].view();
            match layer {
                Layer::Dense(d) => {
                    let (dw, db, dx) = d.backward(input, out, delta.view());
                    grads.push(LayerGradient::Dense { weights: dw, bias: db });
                    delta = dx;
                }
                Layer::BatchNorm(b) => {
                    let stats = activations.batch_stats[i]
                        .as_ref()
                        .ok_or_else(|| Error::Contract("missing batch statistics".into()))?;
                    let (dscale, dshift, dx) = b.backward(stats, delta.view());
                    grads.push(LayerGradient::BatchNorm {
                        scale: dscale,
                        shift: dshift,
                    });
                    delta = dx;
                }
            }
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, activations: &Activations) -> Result<()> {
        if activations.generation != self.generation {
            return Err(Error::Contract(
                "activations were computed with different model parameters".into(),
            ));
        }
        for (layer, stats) in self.layers.iter_mut().zip(&activations.batch_stats) {
            if let (Layer::BatchNorm(b), Some(stats)) = (layer, stats) {
                b.update_running(stats);
            }
        }
        Ok(())
    }

    /// Mutable flat views of every parameter tensor: per layer `(weights, bias)` or
    /// `(scale, shift)`. Taking them invalidates outstanding activations.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.scale.as_slice_mut().expect("standard layout"));
                    out.push(b.shift.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.scale.as_slice().expect("standard layout"));
                    out.push(b.shift.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }
}
