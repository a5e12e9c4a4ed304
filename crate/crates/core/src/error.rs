use thiserror::Error;

/// Errors surfaced by the tensor core, signal front-end, model code and the
/// on-disk formats.
#[derive(Error, Debug)]
pub enum CoreError {
    /// A caller violated an operation's precondition (shape mismatch, empty
    /// sequence, out-of-range index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward or training pass produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A binary or text artifact on disk failed validation.
    #[error("format error: {0}")]
    Format(String),

    /// Run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

/// Shorthand for building a `Contract` error.
pub fn contract(msg: impl Into<String>) -> CoreError {
    CoreError::Contract(msg.into())
}
