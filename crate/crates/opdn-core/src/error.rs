use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum OpdnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: truncated file")]
    Truncated,

    #[error("checkpoint: checksum mismatch")]
    ChecksumMismatch,

    #[error("checkpoint: unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("checkpoint: bad config record: {0}")]
    BadConfig(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),
}

pub type Result<T> = std::result::Result<T, OpdnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> OpdnError {
    OpdnError::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(msg: impl Into<String>) -> OpdnError {
    OpdnError::ShapeMismatch(msg.into())
}
