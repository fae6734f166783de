//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported character {ch:?} at offset {offset}")]
    UnsupportedChar { ch: char, offset: usize },

    #[error("prompt of {got} tokens exceeds context window {window}: {detail}")]
    WindowOverflow {
        got: usize,
        window: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no queries parsed after {attempts} attempts; last raw output:\n{raw}")]
    QueryParse { attempts: usize, raw: String },

    #[error("adapter fingerprint {adapter:016x} does not match model fingerprint {model:016x}")]
    FingerprintMismatch { adapter: u64, model: u64 },

    #[error("unknown adapter target matrix {0:?}")]
    UnknownTarget(String),

    #[error("invalid layer index {layer}; valid indices are 0..={max}")]
    InvalidLayer { layer: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab} entries")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        value: f64,
        epoch: usize,
        batch: usize,
    },

    #[error("all entries failed: {0}")]
    AllEntriesFailed(String),

    #[error("file format error in {path}: {detail}")]
    FileFormat { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
