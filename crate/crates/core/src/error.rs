use thiserror::Error;

/// Errors raised by the sampler, matching and loss routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MidmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown strategy `{name}` (known: {known})")]
    UnknownStrategy { name: String, known: String },
}

pub type Result<T> = std::result::Result<T, MidmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MidmError::InvalidArgument(msg.into()))
}

pub(crate) fn mismatch<T>(msg: impl Into<String>) -> Result<T> {
    Err(MidmError::ShapeMismatch(msg.into()))
}
