//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum RvoError {
    #[error("rotation matrix is not orthonormal (residual {residual:.3e})")]
    NonOrthonormalInput { residual: f64 },

    #[error("sample count {m} out of range for {n} points")]
    CountOutOfRange { m: usize, n: usize },

    #[error("k = {k} exceeds source size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("neighbor index {idx} out of range for {n} points")]
    IndexOutOfRange { idx: usize, n: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("point count {n} is not divisible by 16")]
    BadSampleCount { n: usize },

    #[error("empty point cloud passed to {context}")]
    EmptyCloud { context: &'static str },

    #[error("image dimensions {h}x{w} must be >= 32 and divisible by 16")]
    ShapeError { h: usize, w: usize },

    #[error("missing calibration file {0}")]
    MissingCalibration(PathBuf),

    #[error("corrupt point file {path}: {reason}")]
    CorruptPointFile { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("dataset format error: {0}")]
    DataFormatError(String),

    #[error("non-finite loss at step {step}; diagnostics at {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("trajectory length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    #[error("checkpoint incompatible with configuration: {0}")]
    CheckpointMismatch(String),

    #[error("parse failure in {path} at line {line}: {reason}")]
    ParseFailure {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, RvoError>;

impl RvoError {
    /// Shape-mismatch shorthand used by the network modules.
    pub fn shape(context: impl Into<String>) -> Self {
        RvoError::ShapeMismatch {
            context: context.into(),
        }
    }
}
