//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension / shape mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Reduction over a zero-extent axis.
    #[error("empty reduction: {0}")]
    EmptyReduction(String),

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Out-of-range index (token ids, axes, rows).
    #[error("index error: {0}")]
    Index(String),

    /// Invalid input data (timestamps, ratios, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed line in a manifest or cue file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Bad command or arguments on the CLI surface.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
