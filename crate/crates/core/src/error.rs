use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("request error: {0}")]
    Request(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Diverged(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
