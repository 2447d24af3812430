use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, Error>;
