use thiserror::Error;

/// Errors produced anywhere in the attack library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("enumeration guard: {0}")]
    Guard(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
