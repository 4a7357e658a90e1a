// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by the engine, the prompt builders and the metrics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or vector dimensions disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied argument is outside its domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A weight manifest could not be loaded or failed validation.
    #[error("load error: {0}")]
    Load(String),

    /// Token string or id not present in the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A sequence or construction exceeds a fixed capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Layer, head or position index out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An intervention spec does not fit the model it is applied to.
    #[error("intervention error: {0}")]
    Intervention(String),

    /// A metric cannot be computed on the given batch.
    #[error("metric error: {0}")]
    Metric(String),

    /// A dataset or fixture description is inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A text input could not be parsed.
    #[error("parse error in {path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed; wraps the underlying error.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        Self::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
