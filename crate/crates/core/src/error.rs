use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// A configuration or argument failed validation before any compute ran.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene spec error: {0}")]
    Spec(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("format error in {what}: expected {expected}, found {actual}")]
    Format {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors detected before any compute: bad flags, bad configs, bad specs.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
