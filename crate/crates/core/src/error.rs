use thiserror::Error;

use crate::model::CellId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("unknown cell {0}")]
    UnknownCell(CellId),

    #[error("invalid transformation: {0}")]
    Transform(String),

    #[error("empty client data for client {0}")]
    EmptyClientData(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot select {requested} clients from a registry of {available}")]
    Selection { requested: usize, available: usize },

    #[error("dataset of {available} samples is too small for {required} samples")]
    DatasetTooSmall { available: usize, required: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
