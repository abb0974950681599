use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("backend unavailable: {0}")]
    Backend(String),

    #[error("sample id sets differ; missing: {}", .missing.join(", "))]
    IdMismatch { missing: Vec<String> },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in JSON error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Precondition(_) => "precondition",
            Error::Protocol(_) => "protocol",
            Error::Backend(_) => "backend",
            Error::IdMismatch { .. } => "id_mismatch",
            Error::Undefined(_) => "undefined",
            Error::Json(_) => "json",
        }
    }
}
