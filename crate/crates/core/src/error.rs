//! Crate-wide error type.
//!
//! Everything fallible in this crate funnels into [`SrError`]. Numerical
//! routines are designed so that expected degeneracies (zero responsibility
//! mass, flat moment residuals, …) are handled in-band; errors are reserved
//! for contract violations (shape mismatches, invalid parameters), resource
//! guards, I/O, and external-process failures.

use std::fmt;

pub type SrResult<T> = Result<T, SrError>;

#[derive(Debug)]
pub enum SrError {
    /// A matrix or vector had the wrong dimensions for the operation.
    Shape { what: &'static str, detail: String },
    /// High-resolution side is not an integer multiple of the low-res side.
    Indivisible { l_high: usize, k: usize },
    /// A scalar or structural parameter is out of its documented domain.
    InvalidParam { what: &'static str, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { what: &'static str },
    /// A size guard refused an allocation (override available at the call site).
    SizeGuard {
        what: &'static str,
        limit: usize,
        requested: usize,
    },
    /// An external denoiser subprocess failed.
    Denoiser { name: String, detail: String },
    /// Malformed on-disk data (bad magic, truncated blob, inconsistent sidecar).
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for SrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SrError::Shape { what, detail } => write!(f, "shape error in {what}: {detail}"),
            SrError::Indivisible { l_high, k } => write!(
                f,
                "high-res side {l_high} is not divisible by decimation factor {k}"
            ),
            SrError::InvalidParam { what, detail } => {
                write!(f, "invalid parameter {what}: {detail}")
            }
            SrError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            SrError::SizeGuard {
                what,
                limit,
                requested,
            } => write!(
                f,
                "{what} of size {requested} exceeds guard limit {limit}; \
                 use the explicit override to proceed"
            ),
            SrError::Denoiser { name, detail } => {
                write!(f, "external denoiser '{name}' failed: {detail}")
            }
            SrError::Format(msg) => write!(f, "format error: {msg}"),
            SrError::Io(e) => write!(f, "i/o error: {e}"),
            SrError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for SrError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SrError::Io(e) => Some(e),
            SrError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SrError {
    fn from(e: std::io::Error) -> Self {
        SrError::Io(e)
    }
}

impl From<serde_json::Error> for SrError {
    fn from(e: serde_json::Error) -> Self {
        SrError::Json(e)
    }
}

/// Shorthand for the recurring "invalid parameter" construction.
pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> SrError {
    SrError::InvalidParam {
        what,
        detail: detail.into(),
    }
}
