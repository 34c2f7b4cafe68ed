use std::path::PathBuf;

/// Error type shared across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument was violated (negative exposure,
    /// out-of-range pixel value, unknown role, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two buffers that must be spatially congruent are not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bad or inconsistent input data (manifests, sequences, datasets).
    #[error("data error: {0}")]
    Data(String),

    /// Configuration problem (missing prerequisite checkpoint, bad stage, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// File could not be read, written or decoded.
    #[error("i/o error for {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// Non-finite values appeared where finite math was required.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Io {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
