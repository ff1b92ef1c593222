use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: one frame needs {needed} samples, clip has {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported version: file has version {found}, this build reads version {expected}")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("label `{label}`: {source}")]
    Label {
        label: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_label(label: &str, source: Error) -> Self {
        Error::Label {
            label: label.to_string(),
            source: Box::new(source),
        }
    }

    /// True for errors caused by the caller's data rather than a broken
    /// internal invariant.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Numerical(_) => false,
            Error::Label { source, .. } => source.is_data_error(),
            _ => true,
        }
    }
}
