use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unsupported audio: {0}")]
    Audio(String),
    #[error("word `{word}` of language `{language}` is not in the lexicon")]
    MissingWord { language: String, word: String },
    #[error("symbol `{0}` is not in the vocabulary")]
    UnknownSymbol(String),
    #[error("feature fingerprint mismatch: codebook expects {expected}, features carry {found}")]
    Fingerprint { expected: String, found: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Nn(#[from] unitts_nn::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
