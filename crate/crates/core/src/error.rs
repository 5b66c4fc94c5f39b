//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream checkpoint for stage `{missing}` (required by `{wanted_by}`)")]
    MissingDependency { missing: String, wanted_by: String },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("image measurement error: {0}")]
    Measure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}
