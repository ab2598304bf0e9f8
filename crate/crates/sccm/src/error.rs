//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SccmError>;

#[derive(Error, Debug)]
pub enum SccmError {
    #[error("config error: {0}")]
    Config(String),

    /// Config validation collects every violated invariant, not just the first.
    #[error("config validation failed:\n{}", .0.join("\n"))]
    ConfigInvalid(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl SccmError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SccmError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 0 ok, 2 config error, 3 data error, 4 runtime/numeric error.
    pub fn exit_code(&self) -> i32 {
        match self {
            SccmError::Config(_) | SccmError::ConfigInvalid(_) => 2,
            SccmError::Data(_) | SccmError::Validation(_) | SccmError::Wav(_) => 3,
            _ => 4,
        }
    }
}

impl From<serde_json::Error> for SccmError {
    fn from(e: serde_json::Error) -> Self {
        SccmError::Serde(e.to_string())
    }
}
