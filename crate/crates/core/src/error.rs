use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unstable simulation step: {0}")]
    Unstable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by NaN/Inf or a blown-up integration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Unstable(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
