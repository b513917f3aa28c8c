use thiserror::Error;

use crate::engine::EngineError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("clean and corrupted inputs differ in length ({clean} vs {corrupt})")]
    LengthMismatch { clean: usize, corrupt: usize },
    #[error("noise sample {0} outside the open interval (0, 1)")]
    InvalidNoise(f64),
    #[error("year {0} outside 00..99")]
    InvalidYear(u32),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{n} coarse nodes exceed the enumeration bound of {max}")]
    TooManyNodes { n: usize, max: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed dataset record: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
