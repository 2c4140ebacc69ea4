//! Routes client operations to partitions by the global directory.
//!
//! While a rebalance commits, the router is blocked: new operations queue up
//! and are released with the new directory. At most one operation per key
//! is in flight, so resending a timed-out request cannot reorder writes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::ctx::{ActorId, Ctx, Notice, Timer};
use crate::directory::{GlobalDirectory, PartitionId};
use crate::rebalance::{ClientOp, Msg, OpResult};

#[derive(Clone, Debug)]
pub struct Completion {
    pub req: u64,
    pub op: ClientOp,
    pub result: OpResult,
    pub submitted_at: u64,
    pub completed_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterStats {
    pub retries: u64,
    pub wrong_partition: u64,
    pub queued_while_blocked: u64,
}

#[derive(Debug)]
struct Outstanding {
    op: ClientOp,
    attempt: u32,
    submitted_at: u64,
}

#[derive(Debug)]
pub struct Router {
    directory: GlobalDirectory,
    blocked: Option<u64>,
    draining: Option<u64>,
    queue: VecDeque<(u64, ClientOp, u64)>,
    outstanding: BTreeMap<u64, Outstanding>,
    busy_keys: BTreeSet<Bytes>,
    retry_after: u64,
    completions: Vec<Completion>,
    stats: RouterStats,
}

impl Router {
    pub fn new(directory: GlobalDirectory, retry_after: u64) -> Self {
        Self {
            directory,
            blocked: None,
            draining: None,
            queue: VecDeque::new(),
            outstanding: BTreeMap::new(),
            busy_keys: BTreeSet::new(),
            retry_after,
            completions: Vec::new(),
            stats: RouterStats::default(),
        }
    }

    pub fn directory(&self) -> &GlobalDirectory {
        &self.directory
    }

    pub fn is_blocked(&self) -> bool {
        self.blocked.is_some() || self.draining.is_some()
    }

    pub fn in_flight(&self) -> usize {
        self.outstanding.len() + self.queue.len()
    }

    pub fn key_busy(&self, key: &[u8]) -> bool {
        self.busy_keys.contains(key)
    }

    pub fn stats(&self) -> &RouterStats {
        &self.stats
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completions)
    }

    pub fn digest(&self) -> String {
        format!(
            "v{} {} out{} q{}",
            self.directory.version(),
            if self.is_blocked() { "blocked" } else { "open" },
            self.outstanding.len(),
            self.queue.len()
        )
    }

    /// Accepts a client operation. Returns `false` if another operation on
    /// the same key is still in flight.
    pub fn submit(&mut self, ctx: &mut Ctx<'_>, req: u64, op: ClientOp) -> bool {
        if !self.busy_keys.insert(op.key().clone()) {
            return false;
        }
        if self.is_blocked() {
            self.stats.queued_while_blocked += 1;
            self.queue.push_back((req, op, ctx.now));
        } else {
            self.dispatch(ctx, req, op, 0, ctx.now);
        }
        true
    }

    fn dispatch(&mut self, ctx: &mut Ctx<'_>, req: u64, op: ClientOp, attempt: u32, submitted_at: u64) {
        let partition: PartitionId = self.directory.route(op.key());
        ctx.send(ActorId::Node(partition.node), Msg::Request { req, partition, op: op.clone() });
        ctx.after(self.retry_after, Timer::Retry { req, attempt });
        self.outstanding.insert(req, Outstanding { op, attempt, submitted_at });
    }

    fn resend(&mut self, ctx: &mut Ctx<'_>, req: u64) {
        if let Some(o) = self.outstanding.remove(&req) {
            self.stats.retries += 1;
            self.dispatch(ctx, req, o.op, o.attempt + 1, o.submitted_at);
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, msg: Msg) {
        match msg {
            Msg::Response { req, result } => self.on_response(ctx, req, result),
            Msg::Block { rid } => {
                if self.blocked.is_none() {
                    self.draining = Some(rid);
                    self.maybe_ack_block(ctx);
                }
            }
            Msg::Unblock { rid, directory } => {
                if directory.version() >= self.directory.version() {
                    self.directory = directory;
                }
                self.blocked = None;
                self.draining = None;
                ctx.notify(Notice::Unblocked { rid });
                while let Some((req, op, at)) = self.queue.pop_front() {
                    self.dispatch(ctx, req, op, 0, at);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        if let Timer::Retry { req, attempt } = timer {
            if self.outstanding.get(&req).is_some_and(|o| o.attempt == attempt) {
                self.resend(ctx, req);
            }
        }
    }

    fn on_response(&mut self, ctx: &mut Ctx<'_>, req: u64, result: OpResult) {
        if !self.outstanding.contains_key(&req) {
            return;
        }
        if result == OpResult::WrongPartition {
            // The node's view is behind ours or ahead of it; try again later.
            self.stats.wrong_partition += 1;
            let o = self.outstanding.get_mut(&req).expect("checked");
            o.attempt += 1;
            ctx.after(1, Timer::Retry { req, attempt: o.attempt });
            return;
        }
        let o = self.outstanding.remove(&req).expect("checked");
        self.busy_keys.remove(o.op.key());
        self.completions.push(Completion { req, op: o.op, result, submitted_at: o.submitted_at, completed_at: ctx.now });
        self.maybe_ack_block(ctx);
    }

    fn maybe_ack_block(&mut self, ctx: &mut Ctx<'_>) {
        if let Some(rid) = self.draining {
            if self.outstanding.is_empty() {
                self.draining = None;
                self.blocked = Some(rid);
                ctx.send(ActorId::Coordinator, Msg::BlockAck { rid });
            }
        }
    }
}
