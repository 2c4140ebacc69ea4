use thiserror::Error;

use crate::directory::{BucketId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid bucket: bits {bits:#b} do not fit depth {depth}")]
    InvalidBucket { bits: u64, depth: u32 },

    #[error("bucket depth {depth} exceeds global depth {global_depth}")]
    DepthExceedsGlobal { depth: u32, global_depth: u32 },

    #[error("no target partitions")]
    NoPartitions,

    #[error("corrupt directory: {0}")]
    CorruptDirectory(String),

    #[error("key hash {hash:#018x} is not owned by this partition")]
    WrongPartition { hash: u64 },

    #[error("primary key must be non-empty")]
    EmptyKey,

    #[error("storage failure on {file}: {reason}")]
    Storage { file: String, reason: String },

    #[error("flush of bucket {bucket} failed: {reason}")]
    FlushFailed { bucket: BucketId, reason: String },

    #[error("write-ahead log append failed: {0}")]
    WalAppend(String),

    #[error("corrupt file {file}: {reason}")]
    Corrupt { file: String, reason: String },

    #[error("splits are disabled while a rebalance is active")]
    SplitsDisabled,

    #[error("bucket {0} is not present in the local directory")]
    UnknownBucket(BucketId),

    #[error("a rebalance is already in progress")]
    RebalanceInProgress,

    #[error("rebalance aborted: {0}")]
    RebalanceAborted(String),

    #[error("node {0} is unavailable")]
    Unavailable(NodeId),

    /// Raised by an armed crash point. The owning actor must discard all
    /// volatile state.
    #[error("crashed at {0}")]
    Crash(String),
}

impl Error {
    pub fn is_crash(&self) -> bool {
        matches!(self, Error::Crash(_))
    }
}
