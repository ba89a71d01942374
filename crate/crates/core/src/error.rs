use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error in {}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
