use std::path::PathBuf;

use mvfa_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("{what}: malformed input at byte {offset}: {reason}")]
    Format {
        what: String,
        offset: usize,
        reason: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("memory bank: {0}")]
    Bank(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    NumericFailure { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
