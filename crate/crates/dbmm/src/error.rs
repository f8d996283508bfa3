use thiserror::Error;

/// Errors surfaced by the multiplication engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate block at ({0}, {1})")]
    DuplicateBlock(usize, usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("ownership violation: {0}")]
    OwnershipViolation(String),

    #[error("process grid {0}x{1} is not square")]
    NonSquareGrid(usize, usize),

    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),

    #[error("stack entry offset out of range: {0}")]
    OffsetOutOfRange(String),

    #[error("densify plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("result of {0}x{1} elements does not fit the replication budget of {2}")]
    ResultTooLargeForReplication(usize, usize, usize),

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("rank {0} panicked: {1}")]
    RankPanic(usize, String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
