//! Error surface of the command layer, carrying the process exit code.

use rsamseg_core::Error as CoreError;

/// Exit codes: 0 success, 2 usage, 3 data/I-O, 4 runtime/training.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config, inconsistent parameters → exit 2.
    Usage(String),
    /// Missing or malformed inputs and output I/O failures → exit 3.
    Data(String),
    /// Training aborted at runtime → exit 4.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        let msg = e.to_string();
        match e {
            CoreError::Parameter(_) | CoreError::Config(_) | CoreError::Shape(_) => {
                CliError::Usage(msg)
            }
            CoreError::Data(_) | CoreError::Io(_) | CoreError::Checkpoint(_) => {
                CliError::Data(msg)
            }
            CoreError::Train(_) => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(format!("i/o error: {e}"))
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> CliError {
        CliError::Data(format!("image error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
