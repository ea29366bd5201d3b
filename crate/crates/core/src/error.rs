use std::path::PathBuf;

use alora_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A configuration field failed validation; `path` is the dotted field path.
    #[error("invalid config at {path}: {message}")]
    Config { path: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
