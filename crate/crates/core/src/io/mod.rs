//! On-disk formats: model manifests with weight blobs, dataset files and
//! run configurations.
//!
//! All numeric payloads are little-endian binary32, row-major.

mod config;
mod dataset;
mod manifest;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::model::ModelError;

pub(crate) use config::check_probabilities;
pub use config::{load_config, Metric, Mode, RunConfig, TargetSelector, DEFAULT_BUDGET, DEFAULT_EPSILON, DEFAULT_TRIALS, DEFAULT_WINDOW};
pub use dataset::{load_dataset, save_dataset, LABELS_MAGIC, SAMPLES_MAGIC};
pub use manifest::{load_model, save_model, MANIFEST_FORMAT};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {field}: {reason}", path.display())]
    Invalid {
        path: PathBuf,
        field: String,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error("{}: {source}", path.display())]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True when the underlying cause is a missing or unreadable input.
    pub fn is_not_found(&self) -> bool {
        matches!(self, IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub(crate) fn parse_json<D: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<D, IoError> {
    serde_json::from_slice(bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline; deterministic for a given value.
pub(crate) fn to_json_bytes<S: serde::Serialize>(value: &S) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    bytes
}

pub(crate) fn sibling(base: &Path, name: &str) -> PathBuf {
    base.parent().unwrap_or_else(|| Path::new(".")).join(name)
}
