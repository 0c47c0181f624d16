//! Model-X knockoffs from latent-variable auto-encoders.
//!
//! The crate trains an encoder/decoder pair on a feature matrix and produces
//! knockoffs by encoding each observed row and decoding a fresh draw. Two
//! Gaussian baselines (second-order model-X and fixed-X knockoffs) are
//! included for comparison, together with the lasso path, the signed-max
//! lambda statistic and the knockoff / knockoff+ filter.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod gaussian;
pub mod hiv;
pub mod lasso;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod vae;

pub use data::{ColumnKind, DataMatrix, GeneratorTag, KnockoffPair, Provenance};
pub use error::{Error, Result};
