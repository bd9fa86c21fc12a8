use thiserror::Error;

/// Errors raised by the conformal and certification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied function returned a value outside its documented range.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Incompatible or invalid configuration (e.g. Gaussian smoothing with a binary ball).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("confidence budget exceeded: spent {spent} of {eta}")]
    BudgetExceeded { spent: f64, eta: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
