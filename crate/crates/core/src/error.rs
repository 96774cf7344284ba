use thiserror::Error;

#[derive(Debug, Error)]
pub enum RgrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RgrError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(RgrError::InvalidArgument(msg.into()))
}
