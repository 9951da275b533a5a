//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by graph construction, tensor arithmetic, autodiff,
/// training, and file I/O.
#[derive(Debug, Error)]
pub enum GnnError {
    /// Incompatible shapes or extents. The message names both offenders.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An index outside its valid range. The message names the position.
    #[error("index error: {0}")]
    Index(String),

    /// A violated precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configurable resource cap was exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Malformed input data; the message carries line/field context.
    #[error("parse error: {0}")]
    Parse(String),

    /// Well-formed input that violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GnnError>;
