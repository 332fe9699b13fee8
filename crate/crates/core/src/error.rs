use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the command-line front end to pick an
/// exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("rank-deficient input at column {column}")]
    RankDeficient { column: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("channel {channel}: {message}")]
    Channel { channel: String, message: String },
    #[error("training diverged at epoch {epoch}; last finite epoch: {last_finite:?}")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NonFinite(_)
            | Error::RankDeficient { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::Shape(_)
            | Error::Channel { .. }
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
