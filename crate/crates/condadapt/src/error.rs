use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a checkpoint container could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}, not a checkpoint container")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("container truncated: {0}")]
    Truncated(String),

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("tensor `{name}` failed its integrity check")]
    HashMismatch { name: String },

    #[error("bad tensor layout: {0}")]
    Layout(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] condadapt_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: corrupt checkpoint: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },

    #[error("{path}: CSV error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("missing {artifact} at {path}; run `condadapt {command}` first")]
    MissingArtifact {
        artifact: String,
        path: PathBuf,
        command: &'static str,
    },

    #[error("invalid artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn artifact(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
