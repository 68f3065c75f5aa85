use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed image header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("invalid shift {shift} for width {width}")]
    InvalidShift { shift: i64, width: usize },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("channel mismatch: model expects {expected} channel(s), got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("bad model file: {0}")]
    BadModel(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
