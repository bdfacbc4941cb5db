use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The operation is undefined for this input; callers are expected to
    /// fall back (e.g. no context tokens for the local augmentation).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no candidate mask among {0} proposals")]
    NoCandidate(usize),

    #[error("backend failure at iteration {iteration}: {source}")]
    Backend {
        iteration: usize,
        #[source]
        source: BackendError,
    },

    #[error("backend unavailable: {0}")]
    BackendSetup(#[from] BackendError),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
