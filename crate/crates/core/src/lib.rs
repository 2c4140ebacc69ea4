pub mod directory;
pub mod error;
pub mod harness;
pub mod lsm;
pub mod node;
pub mod rebalance;
pub mod sim;
pub mod storage;

pub use directory::{BucketId, GlobalDirectory, NodeId, PartitionId};
pub use error::{Error, Result};
