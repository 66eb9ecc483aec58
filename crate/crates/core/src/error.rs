use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): area must be positive")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("invalid tube: {0}")]
    InvalidTube(String),

    #[error("progress value {value} at index {index} is outside [0, 1]")]
    ProgressOutOfRange { index: usize, value: f64 },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("box projects entirely outside the {height}x{width} feature grid")]
    BoxOutsideMap { height: usize, width: usize },

    #[error("backward pass requires the cache of a training-mode forward pass")]
    MissingCache,

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("dataset has no ground-truth tubes to train on")]
    EmptyDataset,

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("missing predictions: {0}")]
    MissingPredictions(String),

    #[error("empty evaluation window [{start}, {end}]")]
    EmptyWindow { start: f64, end: f64 },

    #[error("validation: {0}")]
    Validation(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("unsupported {format} version {found} (expected {expected})")]
    UnsupportedVersion {
        format: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("missing features for video `{0}`")]
    MissingFeatures(String),

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

    /// Short machine-readable tag used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBox { .. } => "invalid_box",
            Error::InvalidTube(_) => "invalid_tube",
            Error::ProgressOutOfRange { .. } => "progress_out_of_range",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BoxOutsideMap { .. } => "box_outside_map",
            Error::MissingCache => "missing_cache",
            Error::UnknownClass(_) => "unknown_class",
            Error::EmptyDataset => "empty_dataset",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::MissingPredictions(_) => "missing_predictions",
            Error::EmptyWindow { .. } => "empty_window",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::MissingFeatures(_) => "missing_features",
            Error::Io { .. } => "io",
        }
    }
}
