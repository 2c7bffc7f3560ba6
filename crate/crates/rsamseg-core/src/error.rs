use thiserror::Error;

/// Error surface shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data is malformed (missing bands, non-finite pixels, bad labels).
    #[error("data error: {0}")]
    Data(String),

    /// Model configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A checkpoint archive failed to parse or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-recoverable state (e.g. non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
}
