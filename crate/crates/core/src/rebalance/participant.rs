//! A storage node: serves client requests for its partitions and takes part
//! in rebalances as a source, a destination, or both.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use super::messages::{ClientOp, Msg, OpResult};
use super::plan::{Move, RebalancePlan};
use crate::directory::{BucketId, NodeId, PartitionId};
use crate::error::{Error, Result};
use crate::lsm::{BucketedLsm, Entry};
use crate::node::{Partition, PartitionOptions, WriteOp};
use crate::sim::{ActorId, Ctx, Timer};
use crate::storage::Env;

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub partitions: u32,
    pub opts: PartitionOptions,
    /// Records per `DataBatch`.
    pub scan_batch: usize,
    /// Ticks the asynchronous snapshot flush takes.
    pub flush_delay: u64,
}

type EntryStream = Box<dyn Iterator<Item = Entry> + Send>;

struct Source {
    moves: Vec<Move>,
    /// Moving buckets whose writes are forwarded, with their destination.
    replicating: BTreeMap<BucketId, PartitionId>,
    scan: VecDeque<(Move, EntryStream)>,
}

#[derive(Debug)]
struct Destination {
    expected: BTreeSet<BucketId>,
    scanned: BTreeSet<BucketId>,
    sources: BTreeSet<PartitionId>,
    ended: BTreeSet<PartitionId>,
    /// Highest sequence number applied per source, for duplicate delivery.
    applied: BTreeMap<PartitionId, u64>,
    reported: bool,
}

impl Destination {
    fn ready(&self) -> bool {
        self.scanned == self.expected && self.ended.is_superset(&self.sources)
    }
}

struct Participation {
    rid: u64,
    plan: Option<Arc<RebalancePlan>>,
    sources: BTreeMap<u32, Source>,
    dests: BTreeMap<u32, Destination>,
    prepare_requested: bool,
    voted: bool,
    next_seq: u64,
}

impl Participation {
    fn new(rid: u64) -> Self {
        Self {
            rid,
            plan: None,
            sources: BTreeMap::new(),
            dests: BTreeMap::new(),
            prepare_requested: false,
            voted: false,
            next_seq: 0,
        }
    }
}

pub struct NodeActor {
    cfg: NodeConfig,
    env: Env,
    partitions: BTreeMap<u32, Partition>,
    active: Option<Participation>,
    splits_held: bool,
}

impl std::fmt::Debug for NodeActor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeActor").field("id", &self.cfg.id).field("digest", &self.digest()).finish()
    }
}

impl NodeActor {
    /// A node whose slot `s` starts with `buckets[s]`.
    pub fn create(cfg: NodeConfig, env: Env, buckets: &BTreeMap<u32, Vec<BucketId>>) -> Result<Self> {
        let mut partitions = BTreeMap::new();
        for slot in 0..cfg.partitions {
            let id = PartitionId::new(cfg.id, slot);
            let own = buckets.get(&slot).cloned().unwrap_or_default();
            partitions.insert(slot, Partition::create(env.clone(), id, cfg.opts.clone(), &own)?);
        }
        Ok(Self { cfg, env, partitions, active: None, splits_held: false })
    }

    /// Restarts the node from storage. Splits stay disabled until the
    /// coordinator answers the `Hello`.
    pub fn recover(cfg: NodeConfig, env: Env, ctx: &mut Ctx<'_>) -> Result<Self> {
        let mut partitions = BTreeMap::new();
        let mut prepared = BTreeSet::new();
        for slot in 0..cfg.partitions {
            let id = PartitionId::new(cfg.id, slot);
            let (p, report) = Partition::recover(env.clone(), id, cfg.opts.clone())?;
            prepared.extend(report.prepared);
            partitions.insert(slot, p);
        }
        let mut node = Self { cfg, env, partitions, active: None, splits_held: false };
        node.hold_splits();
        ctx.send(ActorId::Coordinator, Msg::Hello { node: node.cfg.id, prepared: prepared.into_iter().collect() });
        Ok(node)
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn partitions(&self) -> impl Iterator<Item = &Partition> {
        self.partitions.values()
    }

    pub fn partition(&self, slot: u32) -> Option<&Partition> {
        self.partitions.get(&slot)
    }

    pub fn partition_mut(&mut self, slot: u32) -> Option<&mut Partition> {
        self.partitions.get_mut(&slot)
    }

    pub fn active_rebalance(&self) -> Option<u64> {
        self.active.as_ref().map(|a| a.rid)
    }

    pub fn splits_held(&self) -> bool {
        self.splits_held
    }

    pub fn digest(&self) -> String {
        let mut s = String::new();
        for (slot, p) in &self.partitions {
            s.push_str(&format!("p{slot}:lsn{}:b{}", p.last_lsn(), p.bucket_ids().len()));
            if let Some(st) = p.staged() {
                s.push_str(&format!(":s{}{}", st.rebalance(), if st.is_prepared() { "P" } else { "" }));
            }
            s.push(' ');
        }
        if let Some(a) = &self.active {
            s.push_str(&format!("r{}", a.rid));
        }
        s
    }

    fn hold_splits(&mut self) {
        if !self.splits_held {
            for p in self.partitions.values() {
                p.disable_splits();
            }
            self.splits_held = true;
        }
    }

    fn release_splits(&mut self) {
        if self.splits_held {
            for p in self.partitions.values() {
                p.enable_splits();
            }
            self.splits_held = false;
        }
    }

    fn pid(&self, slot: u32) -> PartitionId {
        PartitionId::new(self.cfg.id, slot)
    }

    fn part(&mut self, slot: u32) -> Result<&mut Partition> {
        let id = self.cfg.id;
        self.partitions.get_mut(&slot).ok_or(Error::Unavailable(id))
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, from: ActorId, msg: Msg) -> Result<()> {
        match msg {
            Msg::Request { req, partition, op } => self.on_request(ctx, from, req, partition, op),
            Msg::CollectDirectories { rid } => self.on_collect(ctx, rid),
            Msg::Snapshot { rid, plan } => self.on_snapshot(ctx, rid, plan),
            Msg::DataBatch { rid, seq, src, dst, bucket, entries } => {
                if !self.accept_seq(rid, src, dst, seq) {
                    return Ok(());
                }
                ignore_stale(self.part(dst.slot)?.stage_load(rid, bucket, entries))
            }
            Msg::ScanDone { rid, dst, bucket, .. } => self.on_scan_done(ctx, rid, dst, bucket),
            Msg::ReplicatedWrite { rid, seq, src, dst, record } => {
                if !self.accept_seq(rid, src, dst, seq) {
                    return Ok(());
                }
                ignore_stale(self.part(dst.slot)?.stage_replicate(rid, &record))
            }
            Msg::ReplicationEnd { rid, src, dst } => {
                if let Some(d) = self.dest_mut(rid, dst.slot) {
                    d.ended.insert(src);
                }
                self.try_vote(ctx)
            }
            Msg::Prepare { rid } => self.on_prepare(ctx, rid),
            Msg::Commit { rid, plan } => self.on_commit(ctx, rid, plan),
            Msg::Abort { rid } => self.on_abort(ctx, rid),
            Msg::Resume => {
                if self.active.is_none() {
                    for p in self.partitions.values_mut() {
                        p.discard_staged(None)?;
                    }
                    self.release_splits();
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) -> Result<()> {
        match timer {
            Timer::FlushDone { rid, slot } => self.on_flush_done(ctx, rid, slot),
            Timer::ScanNext { rid, slot } => self.on_scan_next(ctx, rid, slot),
            _ => Ok(()),
        }
    }

    // ---- client traffic ----

    fn on_request(&mut self, ctx: &mut Ctx<'_>, from: ActorId, req: u64, partition: PartitionId, op: ClientOp) -> Result<()> {
        if partition.node != self.cfg.id || !self.partitions.contains_key(&partition.slot) {
            ctx.send(from, Msg::Response { req, result: OpResult::WrongPartition });
            return Ok(());
        }
        let slot = partition.slot;
        let result = match op {
            ClientOp::Get(key) => match self.part(slot)?.point_lookup(&key) {
                Ok(v) => OpResult::Value(v),
                Err(Error::WrongPartition { .. }) => OpResult::WrongPartition,
                Err(e) if e.is_crash() => return Err(e),
                Err(e) => OpResult::Failed(e.to_string()),
            },
            ClientOp::Write(w) => self.write(ctx, slot, w)?,
        };
        ctx.send(from, Msg::Response { req, result });
        Ok(())
    }

    fn write(&mut self, ctx: &mut Ctx<'_>, slot: u32, op: WriteOp) -> Result<OpResult> {
        let p = self.part(slot)?;
        let rec = match p.apply_write(op) {
            Ok(rec) => rec,
            Err(Error::WrongPartition { .. }) => return Ok(OpResult::WrongPartition),
            Err(e) if e.is_crash() => return Err(e),
            Err(e) => return Ok(OpResult::Failed(e.to_string())),
        };
        let maintenance = p.enforce_memory_budget();
        let src = self.pid(slot);
        if let Some(a) = &mut self.active {
            if let Some(dst) = a.sources.get(&slot).and_then(|s| s.replicating.get(&rec.bucket)) {
                a.next_seq += 1;
                ctx.counters.replicated_writes += 1;
                ctx.send(
                    ActorId::Node(dst.node),
                    Msg::ReplicatedWrite { rid: a.rid, seq: a.next_seq, src, dst: *dst, record: rec },
                );
            }
        }
        // The write itself is durable; a failing background flush does not
        // fail it, but a crash does take the node down.
        match maintenance {
            Err(e) if e.is_crash() => Err(e),
            _ => Ok(OpResult::Written),
        }
    }

    // ---- rebalance ----

    fn dest_mut(&mut self, rid: u64, slot: u32) -> Option<&mut Destination> {
        self.active.as_mut().filter(|a| a.rid == rid).and_then(|a| a.dests.get_mut(&slot))
    }

    fn accept_seq(&mut self, rid: u64, src: PartitionId, dst: PartitionId, seq: u64) -> bool {
        let Some(d) = self.dest_mut(rid, dst.slot) else {
            return false;
        };
        let last = d.applied.entry(src).or_insert(0);
        if seq <= *last {
            return false;
        }
        *last = seq;
        true
    }

    /// Drops whatever an earlier rebalance left behind.
    fn clear_active(&mut self) -> Result<()> {
        if let Some(a) = self.active.take() {
            for (slot, s) in a.sources {
                for m in s.moves {
                    self.part(slot)?.resume_merges(m.bucket)?;
                }
            }
            for p in self.partitions.values_mut() {
                p.discard_staged(Some(a.rid))?;
            }
        }
        Ok(())
    }

    fn on_collect(&mut self, ctx: &mut Ctx<'_>, rid: u64) -> Result<()> {
        if self.active.as_ref().is_some_and(|a| a.rid != rid) {
            self.clear_active()?;
        }
        for p in self.partitions.values_mut() {
            if p.staged().is_some_and(|s| s.rebalance() != rid) {
                p.discard_staged(None)?;
            }
        }
        self.hold_splits();
        if self.active.is_none() {
            self.active = Some(Participation::new(rid));
        }
        let locals = self.partitions.iter().map(|(slot, p)| (self.pid(*slot), p.bucket_ids())).collect();
        ctx.send(ActorId::Coordinator, Msg::Directories { rid, node: self.cfg.id, locals });
        Ok(())
    }

    fn on_snapshot(&mut self, ctx: &mut Ctx<'_>, rid: u64, plan: Arc<RebalancePlan>) -> Result<()> {
        let Some(a) = self.active.as_mut().filter(|a| a.rid == rid && a.plan.is_none()) else {
            return Ok(());
        };
        a.plan = Some(plan.clone());
        let node = self.cfg.id;
        let slots: Vec<u32> = self.partitions.keys().copied().collect();
        for slot in slots {
            let pid = PartitionId::new(node, slot);
            let incoming: Vec<Move> = plan.incoming(pid).copied().collect();
            if !incoming.is_empty() {
                let buckets: Vec<BucketId> = incoming.iter().map(|m| m.bucket).collect();
                self.part(slot)?.stage_open(rid, &buckets)?;
                let d = Destination {
                    expected: buckets.into_iter().collect(),
                    scanned: BTreeSet::new(),
                    sources: incoming.iter().map(|m| m.from).collect(),
                    ended: BTreeSet::new(),
                    applied: BTreeMap::new(),
                    reported: false,
                };
                self.active.as_mut().expect("set above").dests.insert(slot, d);
            }
            let outgoing: Vec<Move> = plan.outgoing(pid).copied().collect();
            if !outgoing.is_empty() {
                for m in &outgoing {
                    self.part(slot)?.snapshot_begin(m.bucket)?;
                }
                let s = Source { moves: outgoing, replicating: BTreeMap::new(), scan: VecDeque::new() };
                self.active.as_mut().expect("set above").sources.insert(slot, s);
                ctx.after(self.cfg.flush_delay, Timer::FlushDone { rid, slot });
            }
        }
        Ok(())
    }

    fn on_flush_done(&mut self, ctx: &mut Ctx<'_>, rid: u64, slot: u32) -> Result<()> {
        let Some(moves) = self
            .active
            .as_ref()
            .filter(|a| a.rid == rid)
            .and_then(|a| a.sources.get(&slot))
            .map(|s| s.moves.clone())
        else {
            return Ok(());
        };
        let mut scan = VecDeque::new();
        for m in &moves {
            let comps = self.part(slot)?.snapshot_finish(m.bucket)?;
            scan.push_back((*m, Box::new(BucketedLsm::scan_components(&comps)) as EntryStream));
        }
        let s = self.active.as_mut().expect("checked").sources.get_mut(&slot).expect("checked");
        s.replicating = moves.iter().map(|m| (m.bucket, m.to)).collect();
        s.scan = scan;
        self.env.point("nc.after-snapshot")?;
        ctx.after(1, Timer::ScanNext { rid, slot });
        Ok(())
    }

    fn on_scan_next(&mut self, ctx: &mut Ctx<'_>, rid: u64, slot: u32) -> Result<()> {
        let batch = self.cfg.scan_batch.max(1);
        let src = self.pid(slot);
        let Some(a) = self.active.as_mut().filter(|a| a.rid == rid) else {
            return Ok(());
        };
        let Some(s) = a.sources.get_mut(&slot) else {
            return Ok(());
        };
        let mut budget = batch;
        while budget > 0 {
            let Some((m, stream)) = s.scan.front_mut() else {
                break;
            };
            let entries: Vec<Entry> = stream.by_ref().take(budget).collect();
            let m = *m;
            budget -= entries.len();
            if !entries.is_empty() {
                a.next_seq += 1;
                ctx.counters.data_batches += 1;
                ctx.counters.records_moved += entries.len() as u64;
                ctx.counters.bytes_moved += entries.iter().map(|e| e.encoded_len() as u64).sum::<u64>();
                ctx.send(
                    ActorId::Node(m.to.node),
                    Msg::DataBatch { rid, seq: a.next_seq, src, dst: m.to, bucket: m.bucket, entries },
                );
            }
            if budget > 0 {
                ctx.send(ActorId::Node(m.to.node), Msg::ScanDone { rid, src, dst: m.to, bucket: m.bucket });
                s.scan.pop_front();
            }
        }
        if !s.scan.is_empty() {
            ctx.after(1, Timer::ScanNext { rid, slot });
        }
        Ok(())
    }

    fn on_scan_done(&mut self, ctx: &mut Ctx<'_>, rid: u64, dst: PartitionId, bucket: BucketId) -> Result<()> {
        if self.dest_mut(rid, dst.slot).is_none() {
            return Ok(());
        }
        self.part(dst.slot)?.stage_scan_done(rid, bucket)?;
        let d = self.dest_mut(rid, dst.slot).expect("checked");
        d.scanned.insert(bucket);
        if d.scanned == d.expected && !d.reported {
            d.reported = true;
            ctx.send(ActorId::Coordinator, Msg::MovementDone { rid, partition: dst });
        }
        self.try_vote(ctx)
    }

    fn on_prepare(&mut self, ctx: &mut Ctx<'_>, rid: u64) -> Result<()> {
        let node = self.cfg.id;
        let Some(a) = self.active.as_mut().filter(|a| a.rid == rid) else {
            ctx.send(ActorId::Coordinator, Msg::Vote { rid, node, prepared: false });
            return Ok(());
        };
        if a.prepare_requested {
            return Ok(());
        }
        a.prepare_requested = true;
        // Writes to moving buckets have stopped; tell every destination that
        // nothing else will follow on this channel.
        for (slot, s) in &a.sources {
            let src = PartitionId::new(node, *slot);
            let mut dsts: Vec<PartitionId> = s.moves.iter().map(|m| m.to).collect();
            dsts.sort();
            dsts.dedup();
            for dst in dsts {
                ctx.send(ActorId::Node(dst.node), Msg::ReplicationEnd { rid, src, dst });
            }
        }
        self.try_vote(ctx)
    }

    /// Votes once `Prepare` has arrived and every incoming bucket is fully
    /// received.
    fn try_vote(&mut self, ctx: &mut Ctx<'_>) -> Result<()> {
        let node = self.cfg.id;
        let Some(a) = self.active.as_ref() else {
            return Ok(());
        };
        if !a.prepare_requested || a.voted || !a.dests.values().all(Destination::ready) {
            return Ok(());
        }
        let rid = a.rid;
        let slots: Vec<u32> = a.dests.keys().copied().collect();
        self.env.point("nc.before-prepare-force")?;
        let mut prepared = true;
        for slot in slots {
            match self.part(slot)?.stage_prepare(rid) {
                Ok(()) => {}
                Err(e) if e.is_crash() => return Err(e),
                Err(_) => prepared = false,
            }
        }
        self.active.as_mut().expect("checked").voted = true;
        ctx.send(ActorId::Coordinator, Msg::Vote { rid, node, prepared });
        self.env.point("nc.after-prepare-vote")?;
        Ok(())
    }

    fn on_commit(&mut self, ctx: &mut Ctx<'_>, rid: u64, plan: Arc<RebalancePlan>) -> Result<()> {
        let slots: Vec<u32> = self.partitions.keys().copied().collect();
        for slot in &slots {
            self.part(*slot)?.install_staged(rid)?;
        }
        self.env.point("nc.after-install")?;
        for slot in &slots {
            let pid = self.pid(*slot);
            let outgoing: Vec<BucketId> = plan.outgoing(pid).map(|m| m.bucket).collect();
            let p = self.part(*slot)?;
            for b in outgoing {
                if p.bucket_ids().contains(&b) {
                    p.drop_bucket(b)?;
                }
            }
        }
        if self.active.as_ref().is_some_and(|a| a.rid == rid) {
            self.active = None;
        }
        self.release_splits();
        self.env.point("nc.before-commit-ack")?;
        ctx.send(ActorId::Coordinator, Msg::Ack { rid, node: self.cfg.id });
        Ok(())
    }

    fn on_abort(&mut self, ctx: &mut Ctx<'_>, rid: u64) -> Result<()> {
        if self.active.as_ref().is_some_and(|a| a.rid == rid) {
            self.clear_active()?;
        }
        for p in self.partitions.values_mut() {
            p.discard_staged(Some(rid))?;
        }
        if self.active.is_none() {
            self.release_splits();
        }
        ctx.send(ActorId::Coordinator, Msg::Ack { rid, node: self.cfg.id });
        Ok(())
    }
}

fn ignore_stale(r: Result<()>) -> Result<()> {
    match r {
        Err(Error::RebalanceAborted(_)) => Ok(()),
        other => other,
    }
}
