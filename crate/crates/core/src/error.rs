use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("euler conversion is ill-conditioned (gimbal lock, |R31| = {0})")]
    GimbalLock(f64),
    #[error("requested {requested} points from a cloud of {available}")]
    BadCount { requested: usize, available: usize },
    #[error("index {index} out of range for cloud of {len}")]
    BadIndex { index: usize, len: usize },
    #[error("embedding needs at least {needed} points, cloud has {available}")]
    TooFewPoints { needed: usize, available: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("source cloud too small: need {needed}, have {available}")]
    SourceTooSmall { needed: usize, available: usize },
    #[error("empty input set")]
    EmptySet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("plane fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("ground removal left no points")]
    AllRemoved,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
