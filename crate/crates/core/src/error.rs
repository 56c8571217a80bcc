use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PteError {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical procedure failed to converge or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, PteError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(PteError::Domain(msg.into()))
}
