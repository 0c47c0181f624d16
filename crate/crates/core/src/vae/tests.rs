use ndarray::{array, Array1, Array2};
use rand::Rng;

use super::sampling::standard_normal;
use super::*;
use crate::data::DataMatrix;
use crate::nn::{AdamConfig, DenseLayer, Layer};
use crate::rng::rng_from_seed;

fn small_gaussian(batch_norm: bool, activation: Activation) -> Architecture {
    Architecture {
        latent: LatentShape::Gaussian { dim: 3 },
        encoder_hidden: vec![5],
        encoder_activation: activation,
        encoder_l2: 0.1,
        decoder_hidden: vec![6],
        decoder_activation: activation,
        decoder_l2: 0.05,
        decoder_batch_norm: batch_norm,
        likelihood: Likelihood::SquaredError,
        output: OutputMode::Mean,
    }
}

fn small_categorical() -> Architecture {
    Architecture {
        latent: LatentShape::Categorical {
            groups: 2,
            categories: 3,
            temperature: 0.7,
        },
        encoder_hidden: vec![5],
        encoder_activation: Activation::Tanh,
        encoder_l2: 0.1,
        decoder_hidden: vec![4],
        decoder_activation: Activation::Tanh,
        decoder_l2: 0.0,
        decoder_batch_norm: false,
        likelihood: Likelihood::Bernoulli,
        output: OutputMode::BernoulliSample,
    }
}

fn binary_data(n: usize, p: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_simple_fn((n, p), || if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
}

/// Central differences over every parameter, compared norm-wise.
fn check_gradients(model: &KnockoffVae, x: &Array2<f64>, noise: &LatentNoise) {
    let analytic: Vec<Vec<f64>> = model
        .elbo_loss(x.view(), noise)
        .unwrap()
        .gradients
        .slices()
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect();
    let h = 1e-5;
    let mut probe = model.clone();
    let loss_at = |m: &KnockoffVae| m.elbo_loss(x.view(), noise).unwrap().terms.loss();
    let mut numeric = Vec::new();
    for t in 0..analytic.len() {
        let mut col = Vec::new();
        for i in 0..analytic[t].len() {
            let orig = probe.parameters()[t][i];
            probe.parameters_mut()[t][i] = orig + h;
            let up = loss_at(&probe);
            probe.parameters_mut()[t][i] = orig - h;
            let down = loss_at(&probe);
            probe.parameters_mut()[t][i] = orig;
            col.push((up - down) / (2.0 * h));
        }
        numeric.push(col);
    }
    let a: Vec<f64> = analytic.concat();
    let n: Vec<f64> = numeric.concat();
    let diff: f64 = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = diff / (norm(&a) + norm(&n));
    assert!(rel < 1e-4, "relative gradient error {rel}");
}

#[test]
fn gaussian_kl_closed_form() {
    assert_eq!(gaussian_kl(0.0, 0.0), 0.0);
    assert!((gaussian_kl(1.0, 0.0) - 0.5).abs() < 1e-15);
    assert!(categorical_kl_uniform(&[0.1; 10]).abs() < 1e-15);
    assert!((categorical_kl_uniform(&[1.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn uniform_categorical_posterior_has_zero_kl() {
    let mut m = small_categorical().build("t", 4, &mut rng_from_seed(1)).unwrap();
    if let Latent::Categorical(c) = &mut m.latent {
        // Zero final layer makes every logit 0.
        for p in c.encoder.parameters_mut().into_iter().rev().take(2) {
            p.fill(0.0);
        }
    }
    let x = binary_data(5, 4, 2);
    let noise = m.draw_noise(5, &mut rng_from_seed(3));
    let terms = m.elbo_loss(x.view(), &noise).unwrap().terms;
    assert!(terms.kl.abs() < 1e-14, "{}", terms.kl);
}

#[test]
fn elbo_gradient_gaussian_tanh_with_batch_norm() {
    let m = small_gaussian(true, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(11))
        .unwrap();
    let x = standard_normal(7, 4, &mut rng_from_seed(12));
    let noise = m.draw_noise(7, &mut rng_from_seed(13));
    check_gradients(&m, &x, &noise);
}

#[test]
fn elbo_gradient_gaussian_sigmoid_decoder_bernoulli() {
    let mut arch = small_gaussian(false, Activation::Sigmoid);
    arch.likelihood = Likelihood::Bernoulli;
    arch.output = OutputMode::Threshold;
    let m = arch.build("t", 4, &mut rng_from_seed(21)).unwrap();
    let x = binary_data(6, 4, 22);
    let noise = m.draw_noise(6, &mut rng_from_seed(23));
    check_gradients(&m, &x, &noise);
}

#[test]
fn elbo_gradient_categorical() {
    let m = small_categorical().build("t", 4, &mut rng_from_seed(31)).unwrap();
    let x = binary_data(6, 4, 32);
    let noise = m.draw_noise(6, &mut rng_from_seed(33));
    check_gradients(&m, &x, &noise);
}

#[test]
fn l2_penalty_enters_loss_exactly() {
    let m = small_gaussian(false, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(41))
        .unwrap();
    let x = standard_normal(5, 4, &mut rng_from_seed(42));
    let noise = m.draw_noise(5, &mut rng_from_seed(43));
    let terms = m.elbo_loss(x.view(), &noise).unwrap().terms;
    let expected: f64 = [
        match &m.latent {
            Latent::Gaussian(g) => g.encoder_mu.l2_term() + g.encoder_logsigma.l2_term(),
            _ => unreachable!(),
        },
        m.decoder.l2_term(),
    ]
    .iter()
    .sum();
    assert_eq!(terms.penalty, expected);
    assert_eq!(terms.loss(), terms.reconstruction + terms.kl + expected);
}

#[test]
fn mismatched_noise_family_is_a_contract_error() {
    let m = small_categorical().build("t", 4, &mut rng_from_seed(1)).unwrap();
    let x = binary_data(3, 4, 2);
    let err = m.elbo_loss(x.view(), &LatentNoise::Gaussian(Array2::zeros((3, 6))));
    assert!(matches!(err, Err(crate::Error::Contract(_))));
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let mut m = small_gaussian(true, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(5))
        .unwrap();
    let before = m.clone();
    let data = DataMatrix::continuous(standard_normal(10, 4, &mut rng_from_seed(6))).unwrap();
    let cfg = TrainingConfig {
        epochs: 0,
        batch_size: 5,
        ..Default::default()
    };
    let hist = m.train(&data, &cfg).unwrap();
    assert!(hist.epoch_loss.is_empty());
    assert_eq!(m.latent, before.latent);
    assert_eq!(m.decoder, before.decoder);
}

#[test]
fn constant_data_is_reconstructed() {
    let consts = array![1.5, -0.5, 0.0, 3.0];
    let x = Array2::from_shape_fn((100, 4), |(_, j)| consts[j]);
    let data = DataMatrix::continuous(x).unwrap();
    let mut m = small_gaussian(true, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(7))
        .unwrap();
    let cfg = TrainingConfig {
        batch_size: 25,
        epochs: 150,
        seed: 8,
        optimizer: AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
    };
    let hist = m.train(&data, &cfg).unwrap();
    let gen = m.generate_detailed(&data, &mut rng_from_seed(9)).unwrap();
    let col_err = (&gen.decoder_mean - &data.values())
        .mapv(f64::abs)
        .mean_axis(ndarray::Axis(0))
        .unwrap();
    assert!(col_err.iter().all(|&e| e < 0.05), "per-column error {col_err}");
    assert!(hist.epoch_loss.last().unwrap() < &hist.epoch_loss[0]);
}

#[test]
fn divergence_names_epoch_and_batch() {
    let x = Array2::from_elem((10, 4), 1e200);
    let data = DataMatrix::continuous(x).unwrap();
    let mut m = small_gaussian(false, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(1))
        .unwrap();
    let cfg = TrainingConfig {
        batch_size: 5,
        epochs: 2,
        ..Default::default()
    };
    match m.train(&data, &cfg) {
        Err(crate::Error::Divergence { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn training_rejects_wrong_kinds_and_batch_sizes() {
    let mut m = small_categorical().build("t", 4, &mut rng_from_seed(1)).unwrap();
    let cont = DataMatrix::continuous(standard_normal(10, 4, &mut rng_from_seed(2))).unwrap();
    assert!(m.train(&cont, &TrainingConfig::default()).is_err());
    let bin = DataMatrix::binary(binary_data(10, 4, 3)).unwrap();
    let too_big = TrainingConfig {
        batch_size: 11,
        ..Default::default()
    };
    assert!(m.train(&bin, &too_big).is_err());
}

#[test]
fn untrained_model_cannot_generate() {
    let m = small_gaussian(false, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(1))
        .unwrap();
    let data = DataMatrix::continuous(Array2::zeros((3, 4))).unwrap();
    assert!(matches!(
        m.generate_knockoffs(&data, &mut rng_from_seed(2)),
        Err(crate::Error::Contract(_))
    ));
}

fn identity_layer(p: usize) -> DenseLayer {
    DenseLayer::new(Array2::eye(p), Array1::zeros(p), Activation::Linear, 0.0).unwrap()
}

#[test]
fn identity_autoencoder_reproduces_data() {
    let p = 5;
    let silent = DenseLayer::new(
        Array2::zeros((p, p)),
        Array1::from_elem(p, -1e3),
        Activation::Linear,
        0.0,
    )
    .unwrap();
    let latent = Latent::Gaussian(GaussianLatent {
        latent_dim: p,
        encoder_mu: MlpModel::new(vec![Layer::Dense(identity_layer(p))]).unwrap(),
        encoder_logsigma: MlpModel::new(vec![Layer::Dense(silent)]).unwrap(),
    });
    let decoder = MlpModel::new(vec![Layer::Dense(identity_layer(p))]).unwrap();
    let mut m = KnockoffVae::new("identity", latent, decoder, Likelihood::SquaredError, OutputMode::Mean).unwrap();
    m.mark_trained();
    let data = DataMatrix::continuous(standard_normal(20, p, &mut rng_from_seed(4))).unwrap();
    let pair = m.generate_knockoffs(&data, &mut rng_from_seed(5)).unwrap();
    assert_eq!(pair.knockoff.values(), data.values());
}

fn coin_model(p: usize) -> KnockoffVae {
    let dim = 2;
    let enc = |rng: &mut _| {
        MlpModel::dense_stack(&[p, dim], Activation::Linear, 0.0, Activation::Linear, 0.0, false, rng).unwrap()
    };
    let mut rng = rng_from_seed(1);
    let latent = Latent::Gaussian(GaussianLatent {
        latent_dim: dim,
        encoder_mu: enc(&mut rng),
        encoder_logsigma: enc(&mut rng),
    });
    let flat = DenseLayer::new(Array2::zeros((p, dim)), Array1::zeros(p), Activation::Sigmoid, 0.0).unwrap();
    let decoder = MlpModel::new(vec![Layer::Dense(flat)]).unwrap();
    let mut m = KnockoffVae::new(
        "coin",
        latent,
        decoder,
        Likelihood::Bernoulli,
        OutputMode::BernoulliSample,
    )
    .unwrap();
    m.mark_trained();
    m
}

#[test]
fn half_probability_decoder_flips_fair_coins() {
    let (n, p) = (10_000, 5);
    let m = coin_model(p);
    let data = DataMatrix::binary(binary_data(n, p, 2)).unwrap();
    let pair = m.generate_knockoffs(&data, &mut rng_from_seed(3)).unwrap();
    for mean in pair.knockoff.column_means() {
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }
}

#[test]
fn bernoulli_residuals_are_uncorrelated_given_latent() {
    let draws = 10_000;
    let probs = array![[0.2, 0.5, 0.7, 0.9]];
    let m = {
        let mut m = coin_model(4);
        m.output = OutputMode::BernoulliSample;
        m
    };
    let mean = Array2::from_shape_fn((draws, 4), |(_, j)| probs[[0, j]]);
    let resid = &m.emit(&mean, &mut rng_from_seed(8)) - &mean;
    let limit = 3.0 / (draws as f64).sqrt();
    for a in 0..4 {
        for b in a + 1..4 {
            let (ca, cb) = (resid.column(a), resid.column(b));
            let (ma, mb) = (ca.mean().unwrap(), cb.mean().unwrap());
            let cov = ca.iter().zip(cb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / draws as f64;
            let sd = |c: ndarray::ArrayView1<f64>, m: f64| (c.mapv(|x| (x - m).powi(2)).sum() / draws as f64).sqrt();
            let r = cov / (sd(ca, ma) * sd(cb, mb));
            assert!(r.abs() < limit, "corr({a},{b}) = {r}");
        }
    }
}

#[test]
fn seeded_training_and_generation_are_reproducible() {
    let data = DataMatrix::binary(binary_data(30, 4, 1)).unwrap();
    let cfg = TrainingConfig {
        batch_size: 10,
        epochs: 3,
        seed: 77,
        ..Default::default()
    };
    let run = |seed: u64| {
        let mut m = small_categorical().build("t", 4, &mut rng_from_seed(5)).unwrap();
        m.train(&data, &cfg).unwrap();
        let pair = m.generate_knockoffs(&data, &mut rng_from_seed(seed)).unwrap();
        (m, pair.knockoff.values().to_owned())
    };
    let (m1, k1) = run(9);
    let (m2, k2) = run(9);
    let (_, k3) = run(10);
    assert_eq!(m1, m2);
    assert_eq!(k1, k2);
    assert_ne!(k1, k3);
}

#[test]
fn presets_have_expected_shapes() {
    let s1 = Preset::S1Vae.build(100, 1).unwrap();
    assert_eq!(s1.latent_width(), 300);
    assert!(matches!(s1.decoder.layers()[2], Layer::BatchNorm(_)));
    assert_eq!(s1.decoder.output_width(), 100);
    let s2 = Preset::S2Vae.build(100, 1).unwrap();
    assert_eq!(s2.decoder.layers().len(), 1);
    assert_eq!(s2.output, OutputMode::Threshold);
    let hiv = Preset::HivCatVae.build(40, 1).unwrap();
    assert_eq!(hiv.latent_width(), 200);
    assert_eq!(Preset::parse("hiv-catvae").unwrap(), Preset::HivCatVae);
    assert!(Preset::parse("gan").is_err());
}

#[test]
fn checkpoint_round_trip_keeps_state() {
    let mut m = small_gaussian(true, Activation::Tanh)
        .build("t", 4, &mut rng_from_seed(1))
        .unwrap();
    let data = DataMatrix::continuous(standard_normal(20, 4, &mut rng_from_seed(2))).unwrap();
    m.train(
        &data,
        &TrainingConfig {
            batch_size: 5,
            epochs: 2,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, Some(3), &mut buf).unwrap();
    let (back, seed) = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(seed, Some(3));
    assert!(back.is_trained());
    assert_eq!(back, m);
    let a = m.generate_knockoffs(&data, &mut rng_from_seed(4)).unwrap();
    let b = back.generate_knockoffs(&data, &mut rng_from_seed(4)).unwrap();
    assert_eq!(a.knockoff.values(), b.knockoff.values());
}
