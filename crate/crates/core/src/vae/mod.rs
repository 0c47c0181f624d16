//! Latent-variable knockoff generators.
//!
//! A [`KnockoffVae`] is trained on the feature matrix alone. Knockoffs are
//! made by encoding each observed row to a latent draw and decoding it; the
//! outcome never enters either step.

mod model;
pub mod sampling;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use model::{
    categorical_kl_uniform, gaussian_kl, CategoricalLatent, ElboGradients, ElboOutput, ElboTerms, GaussianLatent,
    Generation, KnockoffVae, Latent, LatentNoise, Likelihood, OutputMode, TrainingConfig, TrainingHistory,
};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{validated, Checkpoint};
use crate::nn::{Activation, MlpModel};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LatentShape {
    Gaussian {
        dim: usize,
    },
    Categorical {
        groups: usize,
        categories: usize,
        temperature: f64,
    },
}

/// Layer sizes and regularisation for an encoder/decoder pair. The input
/// width comes from the data at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent: LatentShape,
    pub encoder_hidden: Vec<usize>,
    pub encoder_activation: Activation,
    pub encoder_l2: f64,
    pub decoder_hidden: Vec<usize>,
    pub decoder_activation: Activation,
    pub decoder_l2: f64,
    /// Batch-norm between the last decoder hidden layer and the output layer.
    pub decoder_batch_norm: bool,
    pub likelihood: Likelihood,
    pub output: OutputMode,
}

impl Architecture {
    pub fn build<R: Rng + ?Sized>(&self, name: &str, input_width: usize, rng: &mut R) -> Result<KnockoffVae> {
        if input_width == 0 {
            return Err(Error::Config("cannot build a generator for zero features".into()));
        }
        let stack = |hidden: &[usize], from: usize, to: usize| {
            let mut w = Vec::with_capacity(hidden.len() + 2);
            w.push(from);
            w.extend_from_slice(hidden);
            w.push(to);
            w
        };
        let output_activation = match self.likelihood {
            Likelihood::SquaredError => Activation::Linear,
            Likelihood::Bernoulli => Activation::Sigmoid,
        };
        let (latent, latent_width) = match self.latent {
            LatentShape::Gaussian { dim } => {
                let widths = stack(&self.encoder_hidden, input_width, dim);
                let head = |rng: &mut R| {
                    MlpModel::dense_stack(
                        &widths,
                        self.encoder_activation,
                        self.encoder_l2,
                        Activation::Linear,
                        0.0,
                        false,
                        rng,
                    )
                };
                let encoder_mu = head(rng)?;
                let encoder_logsigma = head(rng)?;
                (
                    Latent::Gaussian(GaussianLatent {
                        latent_dim: dim,
                        encoder_mu,
                        encoder_logsigma,
                    }),
                    dim,
                )
            }
            LatentShape::Categorical {
                groups,
                categories,
                temperature,
            } => {
                let width = groups * categories;
                let widths = stack(&self.encoder_hidden, input_width, width);
                let encoder = MlpModel::dense_stack(
                    &widths,
                    self.encoder_activation,
                    self.encoder_l2,
                    Activation::Linear,
                    0.0,
                    false,
                    rng,
                )?;
                (
                    Latent::Categorical(CategoricalLatent {
                        num_groups: groups,
                        categories_per_group: categories,
                        temperature,
                        encoder,
                    }),
                    width,
                )
            }
        };
        let widths = stack(&self.decoder_hidden, latent_width, input_width);
        let decoder = MlpModel::dense_stack(
            &widths,
            self.decoder_activation,
            self.decoder_l2,
            output_activation,
            0.0,
            self.decoder_batch_norm,
            rng,
        )?;
        KnockoffVae::new(name, latent, decoder, self.likelihood, self.output)
    }
}

/// Named architectures used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    /// Continuous features: 500/400 tanh encoder and decoder, L2 0.2, 300-dim
    /// Gaussian latent, batch-norm before a linear output.
    #[serde(rename = "s1-vae")]
    S1Vae,
    /// Binary features: 500/400 relu encoder, L2 0.3, 300-dim Gaussian latent,
    /// single sigmoid decoder layer thresholded at 0.5.
    #[serde(rename = "s2-vae")]
    S2Vae,
    /// Sparse binary features: 20 groups of 10 Gumbel-Softmax categories, one
    /// hidden layer of 200 on each side, Bernoulli sampling.
    #[serde(rename = "hiv-catvae")]
    HivCatVae,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::S1Vae, Preset::S2Vae, Preset::HivCatVae];

    pub fn name(self) -> &'static str {
        match self {
            Preset::S1Vae => "s1-vae",
            Preset::S2Vae => "s2-vae",
            Preset::HivCatVae => "hiv-catvae",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown generator preset `{name}`")))
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Preset::S1Vae => Architecture {
                latent: LatentShape::Gaussian { dim: 300 },
                encoder_hidden: vec![500, 400],
                encoder_activation: Activation::Tanh,
                encoder_l2: 0.2,
                decoder_hidden: vec![500, 400],
                decoder_activation: Activation::Tanh,
                decoder_l2: 0.2,
                decoder_batch_norm: true,
                likelihood: Likelihood::SquaredError,
                output: OutputMode::Mean,
            },
            Preset::S2Vae => Architecture {
                latent: LatentShape::Gaussian { dim: 300 },
                encoder_hidden: vec![500, 400],
                encoder_activation: Activation::Relu,
                encoder_l2: 0.3,
                decoder_hidden: vec![],
                decoder_activation: Activation::Relu,
                decoder_l2: 0.0,
                decoder_batch_norm: false,
                likelihood: Likelihood::Bernoulli,
                output: OutputMode::Threshold,
            },
            Preset::HivCatVae => Architecture {
                latent: LatentShape::Categorical {
                    groups: 20,
                    categories: 10,
                    temperature: 1.0,
                },
                encoder_hidden: vec![200],
                encoder_activation: Activation::Relu,
                encoder_l2: 0.0,
                decoder_hidden: vec![200],
                decoder_activation: Activation::Relu,
                decoder_l2: 0.0,
                decoder_batch_norm: false,
                likelihood: Likelihood::Bernoulli,
                output: OutputMode::BernoulliSample,
            },
        }
    }

    /// Untrained model with weights drawn from `seed`.
    pub fn build(self, input_width: usize, seed: u64) -> Result<KnockoffVae> {
        self.architecture()
            .build(self.name(), input_width, &mut rng_from_seed(seed))
    }
}

pub fn write_checkpoint<W: std::io::Write>(model: &KnockoffVae, seed: Option<u64>, out: W) -> Result<()> {
    Checkpoint::new(seed, model.clone()).write(out)
}

/// Reads a checkpoint and re-checks every shape invariant.
pub fn read_checkpoint<R: std::io::Read>(input: R) -> Result<(KnockoffVae, Option<u64>)> {
    let ck: Checkpoint<KnockoffVae> = Checkpoint::read(input)?;
    let m = ck.payload;
    let latent = match m.latent.clone() {
        Latent::Gaussian(g) => Latent::Gaussian(GaussianLatent {
            latent_dim: g.latent_dim,
            encoder_mu: validated(g.encoder_mu)?,
            encoder_logsigma: validated(g.encoder_logsigma)?,
        }),
        Latent::Categorical(c) => Latent::Categorical(CategoricalLatent {
            encoder: validated(c.encoder)?,
            ..c
        }),
    };
    let m = m.with_parts(latent, validated(m.decoder.clone())?)?;
    Ok((m, ck.seed))
}

#[cfg(test)]
mod tests;
