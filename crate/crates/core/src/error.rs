use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: missing directories, empty corpora, empty lines.
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Malformed or incompatible binary artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("build error: {0}")]
    Build(String),

    #[error("query error: {0}")]
    Query(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("bench error at vocab size {vocab_size}: {source}")]
    Bench {
        vocab_size: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a path to a bare `io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
