use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{gumbel_noise, gumbel_softmax, reparameterize, standard_normal};
use crate::data::{ColumnKind, DataMatrix, GeneratorTag, KnockoffPair};
use crate::error::{Error, Result};
use crate::nn::{Activations, AdamConfig, AdamState, Gradients, MlpModel, Mode};
use crate::rng::rng_from_seed;

const PROB_CLAMP: f64 = 1e-12;

/// Likelihood of the decoder, fixed by the kind of the data it models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Continuous features: per-row sum of squared errors.
    SquaredError,
    /// Binary features: per-row Bernoulli cross-entropy against a sigmoid output.
    Bernoulli,
}

impl Likelihood {
    fn column_kind(self) -> ColumnKind {
        match self {
            Likelihood::SquaredError => ColumnKind::Continuous,
            Likelihood::Bernoulli => ColumnKind::Binary,
        }
    }
}

/// How a knockoff row is emitted from the decoder output `f(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OutputMode {
    /// `f(z)` itself.
    Mean,
    /// `f(z) + sigma * N(0, 1)`, independently per entry.
    GaussianNoise { sigma: f64 },
    /// Independent `Bernoulli(f(z))` draws.
    BernoulliSample,
    /// `1(f(z) > 0.5)`.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub latent_dim: usize,
    pub encoder_mu: MlpModel,
    pub encoder_logsigma: MlpModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalLatent {
    pub num_groups: usize,
    pub categories_per_group: usize,
    pub temperature: f64,
    /// Emits `num_groups * categories_per_group` logits.
    pub encoder: MlpModel,
}

impl CategoricalLatent {
    pub fn width(&self) -> usize {
        self.num_groups * self.categories_per_group
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latent {
    /// Diagonal Gaussian posterior against a standard normal prior.
    Gaussian(GaussianLatent),
    /// Gumbel-Softmax groups against a uniform categorical prior.
    Categorical(CategoricalLatent),
}

impl Latent {
    fn width(&self) -> usize {
        match self {
            Latent::Gaussian(g) => g.latent_dim,
            Latent::Categorical(c) => c.width(),
        }
    }

    fn input_width(&self) -> usize {
        match self {
            Latent::Gaussian(g) => g.encoder_mu.input_width(),
            Latent::Categorical(c) => c.encoder.input_width(),
        }
    }
}

/// Fixed randomness for one ELBO evaluation: `eps` for a Gaussian latent,
/// Gumbel draws for a categorical one. Holding it fixed makes the loss a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub enum LatentNoise {
    Gaussian(Array2<f64>),
    Gumbel(Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 25,
            epochs: 20,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// Batch mean of the per-row reconstruction loss.
    pub reconstruction: f64,
    /// Batch mean of the per-row KL divergence to the prior.
    pub kl: f64,
    /// Sum of L2 weight penalties over all networks.
    pub penalty: f64,
}

impl ElboTerms {
    pub fn loss(&self) -> f64 {
        self.reconstruction + self.kl + self.penalty
    }
}

/// Gradients of the full loss, in the order of [`KnockoffVae::parameters_mut`].
#[derive(Debug, Clone)]
pub struct ElboGradients {
    pub encoders: Vec<Gradients>,
    pub decoder: Gradients,
}

impl ElboGradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.encoders
            .iter()
            .flat_map(Gradients::slices)
            .chain(self.decoder.slices())
            .collect()
    }
}

pub struct ElboOutput {
    pub terms: ElboTerms,
    pub gradients: ElboGradients,
    decoder_activations: Activations,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    /// Mean per-row loss (reconstruction + KL, plus penalty) for each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Output of one generation pass, with the pieces diagnostics need.
#[derive(Debug, Clone)]
pub struct Generation {
    pub pair: KnockoffPair,
    /// The latent draw fed to the decoder.
    pub latent: Array2<f64>,
    /// Decoder output `f(z)` before the output mode was applied.
    pub decoder_mean: Array2<f64>,
}

/// Encoder/decoder pair used as a knockoff generator.
///
/// Knockoffs are produced by encoding each observed row, drawing a latent
/// from the encoder's distribution and decoding it. The outcome variable is
/// never an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoffVae {
    pub name: String,
    pub latent: Latent,
    pub decoder: MlpModel,
    pub likelihood: Likelihood,
    pub output: OutputMode,
    trained: bool,
    training_seed: Option<u64>,
}

/// Gaussian KL to `N(0, 1)` for one coordinate: `(mu^2 + sigma^2 - 1 - ln sigma^2) / 2`.
pub fn gaussian_kl(mu: f64, logsigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * logsigma).exp() - 1.0 - 2.0 * logsigma)
}

/// KL of a categorical distribution to the uniform one over the same support.
pub fn categorical_kl_uniform(probs: &[f64]) -> f64 {
    let k = probs.len() as f64;
    probs.iter().filter(|&&q| q > 0.0).map(|&q| q * (q * k).ln()).sum()
}

impl KnockoffVae {
    pub fn new(
        name: impl Into<String>,
        latent: Latent,
        decoder: MlpModel,
        likelihood: Likelihood,
        output: OutputMode,
    ) -> Result<Self> {
        match &latent {
            Latent::Gaussian(g) => {
                crate::error::check_dim("mu head width", g.latent_dim, g.encoder_mu.output_width())?;
                crate::error::check_dim("logsigma head width", g.latent_dim, g.encoder_logsigma.output_width())?;
                crate::error::check_dim(
                    "encoder input widths",
                    g.encoder_mu.input_width(),
                    g.encoder_logsigma.input_width(),
                )?;
            }
            Latent::Categorical(c) => {
                if !(c.temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "temperature must be positive, got {}",
                        c.temperature
                    )));
                }
                if c.num_groups == 0 || c.categories_per_group < 2 {
                    return Err(Error::Config(
                        "categorical latent needs >= 1 group of >= 2 categories".into(),
                    ));
                }
                crate::error::check_dim("encoder logit width", c.width(), c.encoder.output_width())?;
            }
        }
        crate::error::check_dim("decoder input width", latent.width(), decoder.input_width())?;
        crate::error::check_dim("decoder output width", latent.input_width(), decoder.output_width())?;
        match (likelihood, output) {
            (Likelihood::SquaredError, OutputMode::BernoulliSample | OutputMode::Threshold) => {
                return Err(Error::Config("binary output modes need a Bernoulli decoder".into()));
            }
            (Likelihood::Bernoulli, OutputMode::GaussianNoise { .. }) => {
                return Err(Error::Config("Gaussian output noise needs a continuous decoder".into()));
            }
            (_, OutputMode::GaussianNoise { sigma }) if !(sigma >= 0.0) => {
                return Err(Error::Config(format!(
                    "output noise sigma must be nonnegative, got {sigma}"
                )));
            }
            _ => {}
        }
        Ok(Self {
            name: name.into(),
            latent,
            decoder,
            likelihood,
            output,
            trained: false,
            training_seed: None,
        })
    }

    /// Rebuilds the model around new networks, re-checking shapes and keeping
    /// the training state.
    pub fn with_parts(&self, latent: Latent, decoder: MlpModel) -> Result<Self> {
        let mut out = Self::new(self.name.clone(), latent, decoder, self.likelihood, self.output)?;
        out.trained = self.trained;
        out.training_seed = self.training_seed;
        Ok(out)
    }

    pub fn training_seed(&self) -> Option<u64> {
        self.training_seed
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn input_width(&self) -> usize {
        self.latent.input_width()
    }

    pub fn latent_width(&self) -> usize {
        self.latent.width()
    }

    /// Marks a hand-built model as ready for generation.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn penalty(&self) -> f64 {
        let enc: f64 = match &self.latent {
            Latent::Gaussian(g) => g.encoder_mu.l2_term() + g.encoder_logsigma.l2_term(),
            Latent::Categorical(c) => c.encoder.l2_term(),
        };
        enc + self.decoder.l2_term()
    }

    /// Every parameter tensor: encoder(s) first, then the decoder.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = match &mut self.latent {
            Latent::Gaussian(g) => {
                let mut v = g.encoder_mu.parameters_mut();
                v.extend(g.encoder_logsigma.parameters_mut());
                v
            }
            Latent::Categorical(c) => c.encoder.parameters_mut(),
        };
        out.extend(self.decoder.parameters_mut());
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = match &self.latent {
            Latent::Gaussian(g) => {
                let mut v = g.encoder_mu.parameters();
                v.extend(g.encoder_logsigma.parameters());
                v
            }
            Latent::Categorical(c) => c.encoder.parameters(),
        };
        out.extend(self.decoder.parameters());
        out
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> LatentNoise {
        match &self.latent {
            Latent::Gaussian(g) => LatentNoise::Gaussian(standard_normal(rows, g.latent_dim, rng)),
            Latent::Categorical(c) => LatentNoise::Gumbel(gumbel_noise(rows, c.width(), rng)),
        }
    }

    fn check_data(&self, data: &DataMatrix) -> Result<()> {
        crate::error::check_dim("data width", self.input_width(), data.ncols())?;
        let expected = self.likelihood.column_kind();
        if let Some(j) = data.kinds().iter().position(|k| *k != expected) {
            return Err(Error::Config(format!(
                "column {j} is {:?} but the `{}` decoder models {:?} data",
                data.kinds()[j],
                self.name,
                expected
            )));
        }
        Ok(())
    }

    /// Loss and gradients on one batch with the latent randomness held fixed.
    pub fn elbo_loss(&self, batch: ArrayView2<'_, f64>, noise: &LatentNoise) -> Result<ElboOutput> {
        let rows = batch.nrows();
        if rows == 0 {
            return Err(Error::Empty("ELBO on an empty batch".into()));
        }
        let scale = 1.0 / rows as f64;
        match (&self.latent, noise) {
            (Latent::Gaussian(g), LatentNoise::Gaussian(eps)) => {
                crate::error::check_dim("gaussian noise width", g.latent_dim, eps.ncols())?;
                crate::error::check_dim("gaussian noise rows", rows, eps.nrows())?;
                let mu_acts = g.encoder_mu.forward(batch, Mode::Train)?;
                let ls_acts = g.encoder_logsigma.forward(batch, Mode::Train)?;
                let mu = mu_acts.output();
                let ls = ls_acts.output();
                let z = reparameterize(mu, ls, eps.view());
                let dec_acts = self.decoder.forward(z.view(), Mode::Train)?;
                let (reconstruction, d_out) = self.reconstruction(batch, dec_acts.output(), scale);
                let dec_grads = self.decoder.backward(&dec_acts, d_out.view())?;
                let dz = &dec_grads.input;

                let kl: f64 = Zip::from(mu).and(ls).fold(0.0, |acc, &m, &l| acc + gaussian_kl(m, l)) * scale;
                let d_mu = Zip::from(dz).and(mu).map_collect(|&d, &m| d + scale * m);
                let d_ls = Zip::from(dz)
                    .and(ls)
                    .and(eps)
                    .map_collect(|&d, &l, &e| d * l.exp() * e + scale * ((2.0 * l).exp() - 1.0));
                let mu_grads = g.encoder_mu.backward(&mu_acts, d_mu.view())?;
                let ls_grads = g.encoder_logsigma.backward(&ls_acts, d_ls.view())?;
                Ok(ElboOutput {
                    terms: ElboTerms {
                        reconstruction,
                        kl,
                        penalty: self.penalty(),
                    },
                    gradients: ElboGradients {
                        encoders: vec![mu_grads, ls_grads],
                        decoder: dec_grads,
                    },
                    decoder_activations: dec_acts,
                })
            }
            (Latent::Categorical(c), LatentNoise::Gumbel(gumbel)) => {
                crate::error::check_dim("gumbel noise width", c.width(), gumbel.ncols())?;
                crate::error::check_dim("gumbel noise rows", rows, gumbel.nrows())?;
                let enc_acts = c.encoder.forward(batch, Mode::Train)?;
                let logits = enc_acts.output();
                let y = gumbel_softmax(logits, gumbel.view(), c.num_groups, c.temperature)?;
                let q = gumbel_softmax(logits, Array2::zeros(logits.raw_dim()).view(), c.num_groups, 1.0)?;
                let dec_acts = self.decoder.forward(y.view(), Mode::Train)?;
                let (reconstruction, d_out) = self.reconstruction(batch, dec_acts.output(), scale);
                let dec_grads = self.decoder.backward(&dec_acts, d_out.view())?;
                let dy = &dec_grads.input;

                let k = c.categories_per_group;
                let mut kl = 0.0;
                let mut d_logits = Array2::zeros(logits.raw_dim());
                for r in 0..rows {
                    for grp in 0..c.num_groups {
                        let range = grp * k..(grp + 1) * k;
                        let qs: Vec<f64> = range.clone().map(|i| q[[r, i]]).collect();
                        kl += categorical_kl_uniform(&qs);
                        let entropy_term: f64 = qs.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
                        let inner: f64 = range.clone().map(|i| y[[r, i]] * dy[[r, i]]).sum();
                        for i in range {
                            let through_sample = y[[r, i]] * (dy[[r, i]] - inner) / c.temperature;
                            let qi = q[[r, i]];
                            let through_kl = if qi > 0.0 { qi * (qi.ln() - entropy_term) } else { 0.0 };
                            d_logits[[r, i]] = through_sample + scale * through_kl;
                        }
                    }
                }
                let enc_grads = c.encoder.backward(&enc_acts, d_logits.view())?;
                Ok(ElboOutput {
                    terms: ElboTerms {
                        reconstruction,
                        kl: kl * scale,
                        penalty: self.penalty(),
                    },
                    gradients: ElboGradients {
                        encoders: vec![enc_grads],
                        decoder: dec_grads,
                    },
                    decoder_activations: dec_acts,
                })
            }
            _ => Err(Error::Contract("latent noise does not match the latent family".into())),
        }
    }

    /// Batch-mean reconstruction loss and its gradient with respect to the decoder output.
    fn reconstruction(&self, x: ArrayView2<'_, f64>, out: ArrayView2<'_, f64>, scale: f64) -> (f64, Array2<f64>) {
        match self.likelihood {
            Likelihood::SquaredError => {
                let diff = &out - &x;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
                (loss, diff * (2.0 * scale))
            }
            Likelihood::Bernoulli => {
                let mut loss = 0.0;
                let grad = Zip::from(x).and(out).map_collect(|&xi, &p| {
                    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    loss -= xi * pc.ln() + (1.0 - xi) * (1.0 - pc).ln();
                    scale * (pc - xi) / (pc * (1.0 - pc))
                });
                (loss * scale, grad)
            }
        }
    }

    /// Mini-batch training with Adam. Batches are reshuffled every epoch; the
    /// final partial batch is kept. `(seed, data, config)` determine the result.
    pub fn train(&mut self, data: &DataMatrix, cfg: &TrainingConfig) -> Result<TrainingHistory> {
        self.check_data(data)?;
        let n = data.nrows();
        if n == 0 {
            return Err(Error::Empty("training data has no rows".into()));
        }
        if cfg.batch_size == 0 || cfg.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={n}",
                cfg.batch_size
            )));
        }
        let mut adam = AdamState::new(cfg.optimizer)?;
        let mut rng = rng_from_seed(cfg.seed);
        let x = data.values();
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = TrainingHistory::default();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
                let batch = x.select(Axis(0), rows);
                let noise = self.draw_noise(rows.len(), &mut rng);
                let out = self.elbo_loss(batch.view(), &noise)?;
                let loss = out.terms.loss();
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b, loss });
                }
                total += (out.terms.reconstruction + out.terms.kl) * rows.len() as f64;
                let grads = out.gradients.slices();
                if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    });
                }
                // Running statistics do not enter training-mode gradients, so
                // updating them before the step is equivalent to after.
                self.decoder.update_running_stats(&out.decoder_activations)?;
                adam.step(self.parameters_mut(), &grads)?;
            }
            let epoch_loss = total / n as f64 + self.penalty();
            log::debug!("{}: epoch {epoch} loss {epoch_loss:.6}", self.name);
            history.epoch_loss.push(epoch_loss);
        }
        self.trained = true;
        self.training_seed = Some(cfg.seed);
        Ok(history)
    }

    /// Decoder mean `f(z)` in eval mode.
    pub fn decode_mean(&self, latent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.decoder.predict(latent)
    }

    /// Draws `Z~ ~ Q(z | x)` for every row.
    pub fn encode_sample<R: Rng + ?Sized>(&self, x: ArrayView2<'_, f64>, rng: &mut R) -> Result<Array2<f64>> {
        match &self.latent {
            Latent::Gaussian(g) => {
                let mu = g.encoder_mu.predict(x)?;
                let ls = g.encoder_logsigma.predict(x)?;
                let eps = standard_normal(x.nrows(), g.latent_dim, rng);
                Ok(reparameterize(mu.view(), ls.view(), eps.view()))
            }
            Latent::Categorical(c) => {
                let logits = c.encoder.predict(x)?;
                let g = gumbel_noise(x.nrows(), c.width(), rng);
                gumbel_softmax(logits.view(), g.view(), c.num_groups, c.temperature)
            }
        }
    }

    /// Applies the output mode to decoder means.
    pub fn emit<R: Rng + ?Sized>(&self, mean: &Array2<f64>, rng: &mut R) -> Array2<f64> {
        match self.output {
            OutputMode::Mean => mean.clone(),
            OutputMode::GaussianNoise { sigma } => {
                let noise = standard_normal(mean.nrows(), mean.ncols(), rng);
                mean + &(noise * sigma)
            }
            OutputMode::BernoulliSample => mean.mapv(|p| {
                let u: f64 = rng.random();
                if u < p {
                    1.0
                } else {
                    0.0
                }
            }),
            OutputMode::Threshold => mean.mapv(|p| if p > 0.5 { 1.0 } else { 0.0 }),
        }
    }

    pub fn generate_knockoffs<R: Rng + ?Sized>(&self, data: &DataMatrix, rng: &mut R) -> Result<KnockoffPair> {
        Ok(self.generate_detailed(data, rng)?.pair)
    }

    pub fn generate_detailed<R: Rng + ?Sized>(&self, data: &DataMatrix, rng: &mut R) -> Result<Generation> {
        if !self.trained {
            return Err(Error::Contract(format!("model `{}` has not been trained", self.name)));
        }
        self.check_data(data)?;
        let latent = self.encode_sample(data.values(), rng)?;
        let decoder_mean = self.decode_mean(latent.view())?;
        let knockoff = self.emit(&decoder_mean, rng);
        let tag = GeneratorTag {
            name: self.name.clone(),
            seed: self.training_seed.unwrap_or(0),
        };
        Ok(Generation {
            pair: KnockoffPair::new(data.clone(), knockoff, tag)?,
            latent,
            decoder_mean,
        })
    }
}
