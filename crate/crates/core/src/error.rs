use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (bad JSONL line, bad checkpoint header, ...).
    #[error("{0}")]
    Data(String),

    /// A caller broke an operation's contract (wrong stage, length mismatch, ...).
    #[error("{0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("lexical error at offset {offset}: unexpected character {ch:?}")]
    Lex { offset: usize, ch: char },

    #[error("parse error at token {position}: expected {expected}")]
    Parse { position: usize, expected: String },

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("degenerate axis: {0} has zero variance")]
    DegenerateAxis(&'static str),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
