use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown {what} `{name}` (line {line})")]
    UnknownName {
        what: &'static str,
        name: String,
        line: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} id {id} out of range (size {size})")]
    Index {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("{regularizer} is not defined for {model}")]
    Unsupported {
        regularizer: &'static str,
        model: &'static str,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KgError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KgError>;
