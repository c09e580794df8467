//! Error types shared across the pipeline stages.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("label-domain error: {0}")]
    LabelDomain(String),

    #[error("label scheme error: expected {expected}, got {actual}")]
    Scheme {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        /// Stage names completed before the failure, in execution order.
        completed: Vec<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
