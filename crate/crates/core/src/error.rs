use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or configuration value is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Input data violates a format or range contract.
    #[error("data error: {0}")]
    Data(String),
    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
