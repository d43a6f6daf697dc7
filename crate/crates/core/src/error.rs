//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Softmax/attention asked to normalize over zero valid positions.
    #[error("invalid mask: all positions are masked out")]
    AllMasked,

    /// A numeric or structural parameter is out of range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Bad run configuration (flags, widths, missing pieces).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problems: unreadable files, schema violations, bad splits.
    #[error("data error: {0}")]
    Data(String),

    /// A hashtag that normalizes to the empty string.
    #[error("invalid hashtag {0:?}: empty after normalization")]
    InvalidHashtag(String),

    /// NaN or infinity surfaced where only finite values are legal.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    /// Process exit code contract: 2 usage/config, 3 data, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) | Error::InvalidHashtag(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            _ => 1,
        }
    }
}
