use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LiftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("non-finite gradient in parameter slice `{slice}`")]
    NonFiniteGradient { slice: &'static str },

    #[error("training diverged at iteration {iteration}: {loss} loss is not finite")]
    Diverged { iteration: usize, loss: &'static str },

    #[error("batch mixes pixels from different images ({first} and {other})")]
    MixedImageBatch { first: usize, other: usize },

    #[error("target pixel set is empty")]
    EmptyTargetSet,

    #[error("{segments} segments do not fit into K = {k} instance channels")]
    TooManySegments { segments: usize, k: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },

    #[error(
        "could not place {objects} objects without overlap after {attempts} attempts; \
         try a larger floor extent (currently {half_extent:.3})"
    )]
    Placement {
        objects: usize,
        attempts: usize,
        half_extent: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LiftError {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LiftError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LiftError::Io {
            path: path.into(),
            source,
        }
    }
}
