use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset error in case {case_id}: {message}")]
    Dataset { case_id: String, message: String },

    #[error("relation extraction failed: {0}")]
    ExtractionFailure(String),

    #[error("scoring backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("scoring backend lacks a required capability: {0}")]
    Capability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Backend failures abort a run; everything else is attributable to one input.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_) | Error::Capability(_))
    }
}
