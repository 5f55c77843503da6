use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the odometry pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("depth image has no valid pixels")]
    EmptyDepth,

    #[error("insufficient overlap: {valid} valid residuals, need at least {required}")]
    InsufficientOverlap { valid: usize, required: usize },

    #[error("degenerate geometry: normal matrix condition number {0:.3e}")]
    DegenerateGeometry(f64),

    #[error("no associable entries: {0}")]
    EmptyAssociation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
