use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::plan::RebalancePlan;
use crate::directory::{BucketId, GlobalDirectory, NodeId, PartitionId};
use crate::lsm::Entry;
use crate::node::{LogRecord, Record, WriteOp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientOp {
    Write(WriteOp),
    Get(Bytes),
}

impl ClientOp {
    pub fn key(&self) -> &Bytes {
        match self {
            ClientOp::Write(w) => w.key(),
            ClientOp::Get(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpResult {
    Written,
    Value(Option<Record>),
    /// The partition does not own the key; the router retries.
    WrongPartition,
    Failed(String),
}

#[derive(Clone, Debug)]
pub enum Msg {
    // harness -> coordinator
    StartRebalance { targets: Vec<PartitionId> },

    // router <-> node
    Request { req: u64, partition: PartitionId, op: ClientOp },
    Response { req: u64, result: OpResult },

    // coordinator <-> router
    Block { rid: u64 },
    BlockAck { rid: u64 },
    Unblock { rid: u64, directory: GlobalDirectory },

    // coordinator -> node
    CollectDirectories { rid: u64 },
    Snapshot { rid: u64, plan: Arc<RebalancePlan> },
    Prepare { rid: u64 },
    Commit { rid: u64, plan: Arc<RebalancePlan> },
    Abort { rid: u64 },
    /// Answer to a `Hello` when no rebalance needs the node.
    Resume,

    // node -> coordinator
    Directories { rid: u64, node: NodeId, locals: Vec<(PartitionId, Vec<BucketId>)> },
    MovementDone { rid: u64, partition: PartitionId },
    Vote { rid: u64, node: NodeId, prepared: bool },
    Ack { rid: u64, node: NodeId },
    Hello { node: NodeId, prepared: Vec<u64> },

    // node -> node
    DataBatch { rid: u64, seq: u64, src: PartitionId, dst: PartitionId, bucket: BucketId, entries: Vec<Entry> },
    ScanDone { rid: u64, src: PartitionId, dst: PartitionId, bucket: BucketId },
    ReplicatedWrite { rid: u64, seq: u64, src: PartitionId, dst: PartitionId, record: LogRecord },
    ReplicationEnd { rid: u64, src: PartitionId, dst: PartitionId },
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::StartRebalance { .. } => "StartRebalance",
            Msg::Request { .. } => "Request",
            Msg::Response { .. } => "Response",
            Msg::Block { .. } => "Block",
            Msg::BlockAck { .. } => "BlockAck",
            Msg::Unblock { .. } => "Unblock",
            Msg::CollectDirectories { .. } => "CollectDirectories",
            Msg::Snapshot { .. } => "Snapshot",
            Msg::Prepare { .. } => "Prepare",
            Msg::Commit { .. } => "Commit",
            Msg::Abort { .. } => "Abort",
            Msg::Resume => "Resume",
            Msg::Directories { .. } => "Directories",
            Msg::MovementDone { .. } => "MovementDone",
            Msg::Vote { .. } => "Vote",
            Msg::Ack { .. } => "Ack",
            Msg::Hello { .. } => "Hello",
            Msg::DataBatch { .. } => "DataBatch",
            Msg::ScanDone { .. } => "ScanDone",
            Msg::ReplicatedWrite { .. } => "ReplicatedWrite",
            Msg::ReplicationEnd { .. } => "ReplicationEnd",
        }
    }

    /// Protocol messages, as opposed to client traffic.
    pub fn is_protocol(&self) -> bool {
        !matches!(self, Msg::Request { .. } | Msg::Response { .. })
    }
}
