//! Crate-wide error type. Variants are grouped by the failure class the
//! command-line layer maps to exit codes: configuration and format errors
//! versus numerical failures.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, malformed boxes, out-of-range parameters.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A persisted artifact does not parse or fails its header checks.
    #[error("invalid format in {path}: {reason}")]
    InvalidFormat { path: PathBuf, reason: String },

    /// The controller artifact was produced on a different discretization.
    #[error("grid digest mismatch: artifact {artifact}, configured {configured}")]
    GridDigestMismatch { artifact: String, configured: String },

    /// Gram matrix not positive definite even at the maximum jitter.
    #[error("Gram matrix factorization failed at jitter {max_jitter:e}; check hyperparameters")]
    GramFactorization { max_jitter: f64 },

    /// The nominal map or a model-error posterior produced a non-finite value.
    #[error("non-finite model evaluation: {0}")]
    NonFiniteModel(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// Expert generation could not collect enough satisfying runs.
    #[error("expert generation found {collected} satisfying runs of {requested} within {attempts} attempts")]
    NoExpertFound {
        requested: usize,
        collected: usize,
        attempts: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for failures of numerical origin rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::GramFactorization { .. }
                | Error::NonFiniteModel(..)
                | Error::TrainingDiverged { .. }
                | Error::NoExpertFound { .. }
        )
    }
}
