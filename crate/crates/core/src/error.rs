use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {step} out of range [{lo}, {hi}]")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("step ordering violated: {0}")]
    StepOrder(String),

    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),

    #[error("empty future: no actions before EOS")]
    EmptyFuture,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing prediction for video `{0}`")]
    MissingPrediction(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("non-finite value in {what}: {diagnostics}")]
    NonFinite { what: String, diagnostics: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidRange(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
