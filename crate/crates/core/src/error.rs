use std::path::PathBuf;

use pst_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("sequence too long: {prefix} prefix + {tokens} token positions exceed max_positions {max}")]
    TooLong {
        prefix: usize,
        tokens: usize,
        max: usize,
    },
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: u32, vocab: usize },
    #[error("unknown style {0}")]
    UnknownStyle(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("backbone is frozen; pretraining steps are no longer allowed")]
    Frozen,
    #[error("non-finite {what} at step {step}; update skipped")]
    NonFinite { what: String, step: u64 },
    #[error("prefix blocks disagree: {0}")]
    PrefixMismatch(String),
    #[error("style lexicons overlap on: {0}")]
    LexiconOverlap(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
