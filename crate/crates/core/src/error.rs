use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("metric is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NonPsd { min_eigenvalue: f64 },

    #[error("eigendecomposition failed to converge")]
    EigenFailure,

    #[error("label count {q} exceeds the exhaustive-decoding limit of {max}")]
    Size { q: usize, max: usize },

    #[error("model container version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
