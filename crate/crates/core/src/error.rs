use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),

    #[error("homography is not invertible (|det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("polygon has zero area or covers no pixel centers")]
    EmptyPolygon,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training did not converge after {epochs} epochs (final loss {loss:.6}, train detection rate {detection_rate:.3})")]
    TrainingDidNotConverge {
        epochs: usize,
        loss: f64,
        detection_rate: f64,
    },

    #[error("total-variation solver did not converge in {iterations} iterations (residual {residual:e})")]
    TvNotConverged { iterations: usize, residual: f64 },

    #[error("invalid annotation in {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
