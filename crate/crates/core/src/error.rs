use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place element {element} of image {image} after {attempts} attempts")]
    Placement {
        image: u64,
        element: usize,
        attempts: usize,
    },

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("invalid layer `{0}`")]
    InvalidLayer(String),

    #[error("invalid class index {index} (model has {count} classes)")]
    InvalidClass { index: usize, count: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("schema mismatch: expected version {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
