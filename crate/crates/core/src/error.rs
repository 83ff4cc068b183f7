use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two inputs that must agree on shape or grid do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Picard iteration failed to contract; carries the successive-difference trace.
    #[error("Picard iteration is not contracting (trace: {trace:?})")]
    NonContraction { trace: Vec<f64> },
    #[error("archive format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
