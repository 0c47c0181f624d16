use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A caller broke an API contract (stale activations, untrained model, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("coordinate descent did not converge at lambda = {lambda} after {iterations} iterations")]
    NonConvergence { lambda: f64, iterations: usize },

    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("matrix is not positive semi-definite after repair: {0}")]
    NotPositiveDefinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("unknown drug `{drug}`; available: {}", available.join(", "))]
    UnknownDrug { drug: String, available: Vec<String> },

    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    /// Wraps an error with the experiment cell (or other location) it came from.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        Error::Cell {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::NonConvergence { .. } => "non_convergence",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::Unsupported(_) => "unsupported",
            Error::RankDeficient(_) => "rank_deficient",
            Error::NotPositiveDefinite(_) => "not_psd",
            Error::Empty(_) => "empty",
            Error::Parse { .. } => "parse",
            Error::DuplicateLabel(_) => "duplicate_label",
            Error::UnknownDrug { .. } => "unknown_drug",
            Error::Cell { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
