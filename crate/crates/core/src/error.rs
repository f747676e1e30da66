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

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        path: String,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        path: String,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported image format: {0}")]
    ImageFormat(String),

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the environment (files, parse of inputs)
    /// rather than by a failed numerical check.
    pub fn is_io_or_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::NonNumeric { .. }
                | Error::RaggedRow { .. }
                | Error::Config(_)
                | Error::ImageFormat(_)
                | Error::TensorFile(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
