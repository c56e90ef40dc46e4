use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("load error in {path} at record {record}, field `{field}`: {message}")]
    Load {
        path: PathBuf,
        record: usize,
        field: String,
        message: String,
    },

    #[error("ontology error: {0}")]
    Ontology(String),

    #[error("verb mapping error: {0}")]
    Mapping(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("prompt spans multiple sentences: {0}")]
    CrossSentence(String),

    #[error("generation failed for prompt {prompt:?}: {message}")]
    Generation { prompt: String, message: String },

    #[error("captioning failed for image {image}: {message}")]
    Captioning { image: String, message: String },

    #[error("detection failed for image {image}: {message}")]
    Detection { image: String, message: String },

    #[error("batch assembly failed: {0}")]
    Assembly(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("non-finite loss at step {step} of {substage}; diagnostic checkpoint at {checkpoint}")]
    NonFiniteLoss {
        step: usize,
        substage: String,
        checkpoint: PathBuf,
    },

    #[error("missing augmentation cache entry for {what}; run `mmevent augment` first")]
    MissingCache { what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input/configuration rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Ontology(_) | Error::Schema(_) | Error::Load { .. }
        )
    }
}
