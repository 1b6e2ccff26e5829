use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, bad hyperparameters or an invalid layer/config reference.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    /// An API was called out of order (e.g. backward without a recorded forward pass).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("class `{class}` has {available} images, {required} required")]
    ClassTooSmall {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("gradient check failed in layer `{layer}`: relative error {rel_error:e} exceeds {tolerance:e}")]
    GradientMismatch {
        layer: String,
        rel_error: f64,
        tolerance: f64,
    },

    #[error("training aborted at iteration {iteration}: non-finite loss (last good checkpoint: {checkpoint:?})")]
    TrainingDiverged {
        iteration: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
