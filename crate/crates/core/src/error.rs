//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the warping core, data pipeline, networks, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Non-positive or otherwise unusable dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Mismatched or malformed shapes between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument value.
    #[error("argument error: {0}")]
    Argument(String),

    /// Invalid run or model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset sample failed to load.
    #[error("failed to load sample `{id}`: {reason}")]
    SampleLoad { id: String, reason: String },

    /// Corrupt or incompatible serialized data (checkpoints, fields, manifests).
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;
