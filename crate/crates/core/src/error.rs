use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value in {path} at element {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("label {label} out of range [0, {num_classes}) in {path} at element {index}")]
    LabelRange {
        path: PathBuf,
        index: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("numeric abort at epoch {epoch}, batch {batch}: {detail}")]
    Numeric {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("annotation oracle: {0}")]
    Oracle(String),

    #[error("annotation service: {0}")]
    Service(String),

    #[error("interrupted")]
    Interrupted,
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error originates from dataset or checkpoint contents.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Manifest { .. }
                | Error::MissingFile(_)
                | Error::SizeMismatch { .. }
                | Error::NonFinite { .. }
                | Error::LabelRange { .. }
        )
    }
}
