//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CryoError {
    /// Invalid configuration or parameter value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Mismatched or unsupported array shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// A lookup-table evaluation was requested outside the tabulated extent.
    #[error("table extent exceeded: {0}")]
    TableExtent(String),

    /// Underlying file-system failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported MRC volume file.
    #[error("MRC error: {0}")]
    Mrc(String),

    /// Malformed pose table (CSV) input.
    #[error("pose table error at row {row}: {msg}")]
    PoseTable { row: usize, msg: String },

    /// JSON (de)serialization failure.
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// A numerical routine produced a non-finite value.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}
