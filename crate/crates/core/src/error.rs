use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::gradcheck::GradCheckError;
use crate::metrics::MetricError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("verification failed: {}", .0.join(", "))]
    Verification(Vec<String>),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 I/O, 4 numeric, 5 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Checkpoint(CheckpointError::Io { .. }) => 3,
            Error::Checkpoint(_) => 2,
            Error::Io { .. } => 3,
            Error::Numeric(_) | Error::Optim(_) => 4,
            Error::Verification(_) | Error::GradCheck(_) => 5,
            Error::Tensor(_) | Error::Metric(_) => 4,
        }
    }
}
