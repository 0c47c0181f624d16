//! Minimal dense-network substrate: forward pass, reverse-mode gradients,
//! batch normalisation, an L2 weight penalty and the Adam optimizer.
//!
//! All arithmetic is `f64`. Batches are row-major `n x width` matrices.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod layer;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNorm, DEFAULT_EPSILON as BATCH_NORM_EPSILON, DEFAULT_MOMENTUM as BATCH_NORM_MOMENTUM};
pub use layer::{sigmoid, softmax_in_place, Activation, DenseLayer};
pub use mlp::{Activations, Gradients, Layer, LayerGradient, MlpModel, Mode};
