use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::directory::{BucketId, NodeId, PartitionId};
use crate::rebalance::messages::Msg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActorId {
    Harness,
    Coordinator,
    Router,
    Node(NodeId),
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Harness => f.write_str("harness"),
            ActorId::Coordinator => f.write_str("cc"),
            ActorId::Router => f.write_str("router"),
            ActorId::Node(n) => write!(f, "n{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    /// The asynchronous snapshot flush of a source partition has finished.
    FlushDone { rid: u64, slot: u32 },
    ScanNext { rid: u64, slot: u32 },
    Timeout { rid: u64, epoch: u64 },
    Retry { req: u64, attempt: u32 },
}

/// Facts the actors report to whoever drives the simulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Notice {
    Rejected { reason: String },
    Begun { rid: u64 },
    Planned { rid: u64, moves: Vec<(BucketId, PartitionId, PartitionId)> },
    Blocked { rid: u64 },
    Unblocked { rid: u64 },
    Finished { rid: u64, committed: bool, reason: Option<String> },
    Recovered { actor: ActorId },
    HandlerError { actor: ActorId, error: String },
    StaleRead { key: Bytes },
}

/// Counters that outlive crashes; they measure the run, not an actor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub records_moved: u64,
    pub bytes_moved: u64,
    pub data_batches: u64,
    pub replicated_writes: u64,
    pub protocol_messages: u64,
    pub client_messages: u64,
    pub dropped_messages: u64,
    pub crashes: u64,
}

/// What a handler may do besides changing its own state: send messages,
/// set timers, and report notices.
pub struct Ctx<'a> {
    pub now: u64,
    pub me: ActorId,
    pub counters: &'a mut Counters,
    pub(crate) outbox: Vec<(ActorId, Msg)>,
    pub(crate) timers: Vec<(u64, Timer)>,
    pub(crate) notices: Vec<(u64, Notice)>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: u64, me: ActorId, counters: &'a mut Counters) -> Self {
        Self { now, me, counters, outbox: Vec::new(), timers: Vec::new(), notices: Vec::new() }
    }

    pub fn send(&mut self, to: ActorId, msg: Msg) {
        if msg.is_protocol() {
            self.counters.protocol_messages += 1;
        } else {
            self.counters.client_messages += 1;
        }
        self.outbox.push((to, msg));
    }

    pub fn after(&mut self, delay: u64, timer: Timer) {
        self.timers.push((delay.max(1), timer));
    }

    pub fn notify(&mut self, notice: Notice) {
        self.notices.push((self.now, notice));
    }
}
