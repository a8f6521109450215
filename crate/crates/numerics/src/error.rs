use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn dim_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Dimension(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Argument(msg.into())
}
