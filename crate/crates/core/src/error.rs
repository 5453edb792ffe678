use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by ingestion, allocation, training, evaluation and checkpoints.
#[derive(Debug, Error)]
pub enum DirError {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: interaction references item `{item}` missing from the item file")]
    UnknownItem {
        path: String,
        line: usize,
        item: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("item index {0} is not allocated")]
    Unallocated(u32),

    #[error("group {group}: {members} items do not fit into {cells} implicit cells")]
    InfeasibleGroup {
        group: String,
        members: usize,
        cells: usize,
    },

    #[error("assignment problem has {rows} rows but only {cols} columns")]
    RowsExceedColumns { rows: usize, cols: usize },

    #[error("negative price {0}")]
    NegativePrice(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint was trained on a different catalog (fingerprint {expected:#018x}, got {found:#018x})")]
    CatalogMismatch { expected: u64, found: u64 },

    #[error("catalog has no users after filtering")]
    EmptyCatalog,

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DirError>;
