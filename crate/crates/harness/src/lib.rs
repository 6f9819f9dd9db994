//! Experiment orchestration for the stamina adapters: config files, the
//! method grid, checkpoints, reports and the `stamina` command line.

pub mod config;
pub mod experiment;
pub mod report;
pub mod selftest;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] stamina_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Csv(e.to_string())
    }
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
