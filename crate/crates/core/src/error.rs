//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A feature column has no observed value at all.
    #[error("feature `{0}` has no observed values")]
    AllMissing(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("window ending at t={t} needs {len} steps of history")]
    WindowUnavailable { t: usize, len: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown fine-tuning level `{0}`")]
    UnknownLevel(String),

    #[error("stream too short: {len} samples, need at least {needed}")]
    StreamTooShort { len: usize, needed: usize },

    #[error("no labeled samples available for adaptation at t={t}")]
    NoLabels { t: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
