use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Every variant has a stable short [`DanError::kind`] used as the
/// machine-parsable prefix of CLI error lines.
#[derive(Debug, Error)]
pub enum DanError {
    #[error("sizing: {0}")]
    Sizing(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e}): {detail}")]
    NonFinite {
        step: u64,
        lr: f64,
        grad_norm: f64,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DanError {
    pub fn kind(&self) -> &'static str {
        match self {
            DanError::Sizing(_) => "sizing",
            DanError::Shape(_) => "shape",
            DanError::InvalidArgument(_) => "invalid-argument",
            DanError::Config(_) => "config",
            DanError::Format(_) => "format",
            DanError::Checkpoint(_) => "checkpoint",
            DanError::NonFinite { .. } => "non-finite",
            DanError::Io { .. } => "io",
            DanError::Image { .. } => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DanError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DanError> = std::result::Result<T, E>;
