use std::path::PathBuf;

/// Errors produced by the FWL toolkit.
#[derive(Debug, thiserror::Error)]
pub enum FwlError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two inputs that must agree in shape or grid do not.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A configuration value violates its constraint.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An operation needs a non-empty input.
    #[error("empty input: {0}")]
    Empty(String),

    /// Geometry is degenerate for the requested computation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A file could not be decoded.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FwlError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FwlError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FwlError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FwlError>;
