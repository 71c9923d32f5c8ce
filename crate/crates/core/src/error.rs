use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("path not found: {0}")]
    MissingPath(PathBuf),
    #[error("unparsable corpus file names: {}", .0.join(", "))]
    BadFilenames(Vec<String>),
    #[error("duplicate document {author} {year} in split {split}")]
    DuplicateDocument {
        author: String,
        year: i32,
        split: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("embedding format error: {0}")]
    Format(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in row {row} ({id})")]
    NonFinite { row: usize, id: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by what the user supplied rather than by a stage failing.
    pub fn is_bad_input(&self) -> bool {
        matches!(
            self,
            Error::MissingPath(_)
                | Error::BadFilenames(_)
                | Error::DuplicateDocument { .. }
                | Error::Manifest(_)
                | Error::Format(_)
                | Error::DuplicateId(_)
                | Error::NonFinite { .. }
                | Error::InvalidConfig(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
