use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the registration engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("mask value {value} at index {index} is outside [0, 1]")]
    MaskRange { index: usize, value: f64 },

    #[error("geodesic shooting became unstable at step {step}: max |v| = {max_speed:.3e} exceeds {limit:.3e}")]
    Instability {
        step: usize,
        max_speed: f64,
        limit: f64,
    },

    #[error("degenerate statistics: {samples} neighborhood samples for dimension {dimension}")]
    DegenerateStatistics { samples: usize, dimension: usize },

    #[error("estimator requires ground-truth labels that were not supplied")]
    MissingLabels,

    #[error("tumor disk (center {center:?}, radius {radius}) leaves the grid")]
    TumorOutOfBounds { center: Vec<f64>, radius: f64 },

    #[error("malformed grid header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload length mismatch in {path}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed landmark file {path}: {reason}")]
    Landmarks { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Instability { .. } | Error::DegenerateStatistics { .. } | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
