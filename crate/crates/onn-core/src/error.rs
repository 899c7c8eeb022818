use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric operation produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Image geometry error (crop out of bounds, zero-size target, ...).
    #[error("image error: {0}")]
    Image(String),

    /// File could not be read, decoded, or written.
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// A binary artifact (checkpoint, feature cache) is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A pipeline stage was invoked before its prerequisite artifact exists.
    #[error("missing artifact {path}: run `{produced_by}` first")]
    MissingArtifact { path: PathBuf, produced_by: String },

    /// Dataset content problem (empty class, no usable images, bad label).
    #[error("dataset error: {0}")]
    Dataset(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
