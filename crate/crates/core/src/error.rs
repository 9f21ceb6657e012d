use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input too small: {height}x{width} (minimum side {min}, sides must be multiples of {multiple})")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
        multiple: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("integrity error: {}", describe_integrity(.missing, .unexpected, .mismatched))]
    Integrity {
        missing: Vec<String>,
        unexpected: Vec<String>,
        mismatched: Vec<String>,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed archive: {0}")]
    Format(String),

    #[error("data error at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

fn describe_integrity(missing: &[String], unexpected: &[String], mismatched: &[String]) -> String {
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing [{}]", missing.join(", ")));
    }
    if !unexpected.is_empty() {
        parts.push(format!("unexpected [{}]", unexpected.join(", ")));
    }
    if !mismatched.is_empty() {
        parts.push(format!("shape mismatch [{}]", mismatched.join(", ")));
    }
    parts.join("; ")
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Unsupported(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Io(_) | Error::File { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity_missing(names: Vec<String>) -> Self {
        Error::Integrity {
            missing: names,
            unexpected: Vec::new(),
            mismatched: Vec::new(),
        }
    }
}
