use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("depth image has no valid pixel")]
    AllPixelsInvalid,
    #[error("points behind the camera at indices {0:?}")]
    NonPositiveDepth(Vec<usize>),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("angle range {0:?} exceeds (-pi/2, pi/2) or is not symmetric")]
    InvalidRange((f64, f64)),
    #[error("no default view subset of size {0}")]
    UnknownSubset(usize),
    #[error("crop center has non-positive depth {0}")]
    CenterBehindCamera(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("frame mismatch: expected {expected}, got {got}")]
    FrameMismatch { expected: String, got: String },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("top-n size {n} outside 1..={m}")]
    BadN { n: usize, m: usize },
    #[error("pose angle {index} = {value} outside [{lo}, {hi}]")]
    AnglesOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used by the command-line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFiniteLoss { .. } => ErrorCategory::Numeric,
            Error::InvalidRange(_)
            | Error::UnknownSubset(_)
            | Error::BadN { .. }
            | Error::Invalid(_) => ErrorCategory::Config,
            _ => ErrorCategory::Data,
        }
    }
}

/// Fails with [`Error::NonFiniteLoss`] when `value` is NaN or infinite.
pub fn check_finite(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{what} = {value}"),
        })
    }
}
