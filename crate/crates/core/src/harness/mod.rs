//! Drives workloads against the simulated cluster and keeps the shadow map.

pub mod matrix;
pub mod metrics;
pub mod verify;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{IngestMetrics, LatencyStats, Metrics, PartitionMetrics, RebalanceMetrics, ReportFormat};
pub use verify::{verify, VerifyReport};
pub use workload::{KeyDistribution, Shadow, WorkloadSpec};

use crate::directory::{hash_key, normalized_size, PartitionId};
use crate::error::Result;
use crate::node::WriteOp;
use crate::rebalance::{ClientOp, OpResult};
use crate::sim::{Notice, Sim, SimConfig};

/// Everything a run needs; loadable from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub sim: SimConfig,
    pub workload: WorkloadSpec,
    /// Give up on a rebalance that has not finished after this many ticks.
    pub max_rebalance_ticks: u64,
    pub verify_probes: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { sim: SimConfig::default(), workload: WorkloadSpec::default(), max_rebalance_ticks: 200_000, verify_probes: 32 }
    }
}

pub struct Scenario {
    sim: Sim,
    spec: WorkloadSpec,
    shadow: Shadow,
    rng: ChaCha8Rng,
    keys: Vec<Bytes>,
    next_key: u64,
    targets: Vec<PartitionId>,
    ingest: IngestMetrics,
    rebalance: Option<RebalanceMetrics>,
    window: Option<Window>,
    failed_writes: u64,
    stale_reads: Vec<Bytes>,
    handler_errors: Vec<String>,
    blocked_at: Option<u64>,
}

#[derive(Default)]
struct Window {
    reads: Vec<u64>,
    writes: Vec<u64>,
    submitted_writes: u64,
    submitted_reads: u64,
}

impl Scenario {
    pub fn new(sim: SimConfig, spec: WorkloadSpec) -> Result<Self> {
        let targets = sim.partitions_of(sim.initial_nodes);
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self {
            sim: Sim::new(sim)?,
            spec,
            shadow: Shadow::default(),
            rng,
            keys: Vec::new(),
            next_key: 0,
            targets,
            ingest: IngestMetrics::default(),
            rebalance: None,
            window: None,
            failed_writes: 0,
            stale_reads: Vec::new(),
            handler_errors: Vec::new(),
            blocked_at: None,
        })
    }

    pub fn from_config(cfg: &ClusterConfig) -> Result<Self> {
        Self::new(cfg.sim.clone(), cfg.workload.clone())
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Sim {
        &mut self.sim
    }

    pub fn shadow(&self) -> &Shadow {
        &self.shadow
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn stale_reads(&self) -> &[Bytes] {
        &self.stale_reads
    }

    pub fn handler_errors(&self) -> &[String] {
        &self.handler_errors
    }

    pub fn failed_writes(&self) -> u64 {
        self.failed_writes
    }

    fn new_key(&mut self) -> Bytes {
        let k = self.spec.key(self.next_key, &mut self.rng);
        self.next_key += 1;
        k
    }

    fn submit(&mut self, op: ClientOp) -> bool {
        let is_write = matches!(op, ClientOp::Write(_));
        let ok = self.sim.submit(op).is_some();
        if let (true, Some(w)) = (ok, self.window.as_mut()) {
            if is_write {
                w.submitted_writes += 1;
            } else {
                w.submitted_reads += 1;
            }
        }
        ok
    }

    fn process(&mut self) {
        for c in self.sim.take_completions() {
            let latency = c.completed_at - c.submitted_at;
            match (&c.op, &c.result) {
                (ClientOp::Write(w), OpResult::Written) => {
                    self.shadow.apply(w);
                    if let Some(win) = self.window.as_mut() {
                        win.writes.push(latency);
                    }
                }
                (ClientOp::Get(k), OpResult::Value(v)) => {
                    if v.as_ref() != self.shadow.get(k) {
                        self.stale_reads.push(k.clone());
                    }
                    if let Some(win) = self.window.as_mut() {
                        win.reads.push(latency);
                    }
                }
                (_, OpResult::Failed(_)) => self.failed_writes += 1,
                _ => {}
            }
        }
        for (at, n) in self.sim.take_notices() {
            self.note(at, n);
        }
    }

    fn note(&mut self, at: u64, n: Notice) {
        if let Notice::HandlerError { actor, error } = &n {
            self.handler_errors.push(format!("{actor}: {error}"));
        }
        if let Some(r) = self.rebalance.as_mut() {
            match n {
                Notice::Begun { rid } => r.rebalance_id = Some(rid),
                Notice::Planned { moves, .. } => r.buckets_moved = moves.len() as u64,
                Notice::Blocked { .. } => self.blocked_at = Some(at),
                Notice::Unblocked { .. } => {
                    if let Some(b) = self.blocked_at.take() {
                        r.blocked_window_ticks += at.saturating_sub(b);
                    }
                }
                Notice::Finished { rid, committed, reason } => {
                    r.rebalance_id = Some(rid);
                    r.outcome = if committed { "committed" } else { "aborted" }.into();
                    r.abort_reason = reason;
                }
                Notice::Rejected { reason } => {
                    r.outcome = "rejected".into();
                    r.abort_reason = Some(reason);
                }
                _ => {}
            }
        }
    }

    fn tick(&mut self) {
        let t = self.sim.now() + 1;
        self.sim.run_until(t);
        self.process();
    }

    /// Runs until no client operation, message or restart is pending.
    pub fn drain(&mut self, max_ticks: u64) -> bool {
        let deadline = self.sim.now() + max_ticks;
        while self.sim.router().in_flight() > 0 || self.sim.pending_work() > 0 {
            if self.sim.now() >= deadline {
                return false;
            }
            self.tick();
        }
        true
    }

    /// Loads `spec.records` records through the router.
    pub fn ingest(&mut self) -> IngestMetrics {
        let start = self.sim.now();
        let splits_before = self.splits();
        let mut write_lat = Vec::new();
        let mut submitted = 0;
        while submitted < self.spec.records {
            let batch = (self.spec.ingest_batch.max(1) as u64).min(self.spec.records - submitted);
            for _ in 0..batch {
                let key = self.new_key();
                let op = self.spec.put(key.clone(), &mut self.rng);
                if self.submit(ClientOp::Write(op)) {
                    self.keys.push(key);
                    submitted += 1;
                }
            }
            self.tick_collecting(&mut write_lat);
        }
        while self.sim.router().in_flight() > 0 || self.sim.pending_work() > 0 {
            self.tick_collecting(&mut write_lat);
        }
        self.ingest = IngestMetrics {
            records: self.ingest.records + submitted,
            ticks: self.ingest.ticks + self.sim.now() - start,
            failed_writes: self.failed_writes,
            write_latency: LatencyStats::from_samples(write_lat),
            splits: self.splits() - splits_before,
        };
        self.ingest.clone()
    }

    fn tick_collecting(&mut self, lat: &mut Vec<u64>) {
        self.window = Some(Window::default());
        self.tick();
        lat.append(&mut self.window.take().expect("set above").writes);
    }

    fn splits(&self) -> u64 {
        self.sim
            .node_ids()
            .into_iter()
            .filter_map(|n| self.sim.node(n))
            .flat_map(|n| n.partitions())
            .map(|p| p.primary().stats().splits.load(std::sync::atomic::Ordering::Relaxed))
            .sum()
    }

    fn random_key(&mut self) -> Option<Bytes> {
        if self.keys.is_empty() {
            return None;
        }
        let i = self.rng.gen_range(0..self.keys.len());
        Some(self.keys[i].clone())
    }

    /// One client operation of the concurrent mix: reads, updates, inserts
    /// and deletes.
    fn concurrent_op(&mut self, read: bool) {
        for _ in 0..4 {
            let op = if read {
                match self.random_key() {
                    Some(k) => ClientOp::Get(k),
                    None => return,
                }
            } else {
                let roll: f64 = self.rng.gen();
                match (roll, self.random_key()) {
                    (r, Some(k)) if r < 0.6 => ClientOp::Write(self.spec.put(k, &mut self.rng)),
                    (r, Some(k)) if r < 0.7 => ClientOp::Write(WriteOp::Delete { key: k }),
                    _ => {
                        let k = self.new_key();
                        self.keys.push(k.clone());
                        ClientOp::Write(self.spec.put(k, &mut self.rng))
                    }
                }
            };
            if self.sim.router().key_busy(op.key()) {
                continue;
            }
            self.submit(op);
            return;
        }
    }

    /// Moves the dataset onto `targets` while clients keep writing at
    /// `spec.write_rate` times the ingest rate.
    pub fn rebalance(&mut self, targets: Vec<PartitionId>, max_ticks: u64) -> RebalanceMetrics {
        let nodes_of = |ps: &[PartitionId]| ps.iter().map(|p| p.node).collect::<BTreeSet<_>>().len() as u64;
        let (before, after) = (nodes_of(&self.targets), nodes_of(&targets));
        let baseline = self
            .shadow
            .records()
            .filter(|r| {
                let h = hash_key(&r.key);
                before == 0 || after == 0 || h % before != h % after
            })
            .count() as u64;
        let counters = self.sim.counters().clone();
        let records_before = self.shadow.len() as u64;
        self.rebalance = Some(RebalanceMetrics {
            outcome: "timeout".into(),
            nodes_before: before as u32,
            nodes_after: after as u32,
            records_before,
            buckets_total: self.bucket_count(),
            baseline_moved_estimate: baseline,
            baseline_fraction: ratio(baseline, records_before),
            ..Default::default()
        });
        self.window = Some(Window::default());

        let start = self.sim.now();
        let mut requested = start;
        self.sim.start_rebalance(targets.clone());
        let per_tick = self.spec.write_rate * self.spec.ingest_batch as f64;
        let mut writes = 0.0;
        let mut reads = 0.0;
        let mut finished_at = None;
        loop {
            let now = self.sim.now();
            if now - start > max_ticks {
                break;
            }
            let outcome = self.rebalance.as_ref().map(|r| r.outcome.clone()).unwrap_or_default();
            let done = outcome != "timeout";
            if done && finished_at.is_none() {
                finished_at = Some(now);
            }
            if done && self.sim.all_up() && !self.sim.router().is_blocked() {
                break;
            }
            if !done {
                writes += per_tick;
                reads += per_tick * self.spec.read_ratio;
                while writes >= 1.0 {
                    writes -= 1.0;
                    self.concurrent_op(false);
                }
                while reads >= 1.0 {
                    reads -= 1.0;
                    self.concurrent_op(true);
                }
                // The start request is lost if the coordinator was down.
                let idle = self.sim.coordinator().is_some_and(|c| c.active_id().is_none());
                let begun = self.rebalance.as_ref().is_some_and(|r| r.rebalance_id.is_some());
                if idle && !begun && self.sim.all_up() && now - requested > 50 {
                    requested = now;
                    self.sim.start_rebalance(targets.clone());
                }
            }
            self.tick();
        }
        self.drain(max_ticks);
        let win = self.window.take().unwrap_or_default();
        let c = self.sim.counters();
        let r = self.rebalance.as_mut().expect("set above");
        r.duration_ticks = finished_at.unwrap_or(self.sim.now()) - start;
        r.records_moved = c.records_moved - counters.records_moved;
        r.bytes_moved = c.bytes_moved - counters.bytes_moved;
        r.replicated_writes = c.replicated_writes - counters.replicated_writes;
        r.moved_fraction = ratio(r.records_moved, records_before);
        r.concurrent_writes = win.submitted_writes;
        r.concurrent_reads = win.submitted_reads;
        r.stale_reads = self.stale_reads.len() as u64;
        r.read_latency = LatencyStats::from_samples(win.reads);
        r.write_latency = LatencyStats::from_samples(win.writes);
        if r.outcome == "committed" {
            self.targets = targets;
        }
        r.clone()
    }

    fn bucket_count(&self) -> u64 {
        self.sim
            .node_ids()
            .into_iter()
            .filter_map(|n| self.sim.node(n))
            .flat_map(|n| n.partitions())
            .map(|p| p.bucket_ids().len() as u64)
            .sum()
    }

    /// Flushes every memory component and runs merges to quiescence.
    pub fn flush_and_quiesce(&mut self) -> Result<()> {
        for n in self.sim.node_ids() {
            if let Some(node) = self.sim.node_mut(n) {
                for slot in 0..node.partitions().count() as u32 {
                    node.partition_mut(slot).expect("slot exists").flush_and_quiesce()?;
                }
            }
        }
        Ok(())
    }

    pub fn verify(&self, probes: usize) -> VerifyReport {
        let mut r = verify(&self.sim, &self.shadow, &self.spec, probes, self.spec.seed);
        for k in &self.stale_reads {
            r.problems.push(format!("read of {k:?} returned a value other than the last acknowledged write"));
        }
        for e in &self.handler_errors {
            r.problems.push(format!("handler error: {e}"));
        }
        if self.failed_writes > 0 {
            r.problems.push(format!("{} client operations failed", self.failed_writes));
        }
        r.passed = r.problems.is_empty();
        r
    }

    pub fn metrics(&self) -> Metrics {
        let directory = self.sim.coordinator().map(|c| c.directory().clone()).unwrap_or_else(|| self.sim.router().directory().clone());
        let loads = directory.loads();
        let mut partitions = Vec::new();
        let mut largest = 0;
        for n in self.sim.node_ids() {
            let Some(node) = self.sim.node(n) else { continue };
            for p in node.partitions() {
                for b in p.bucket_ids() {
                    largest = largest.max(normalized_size(b.depth(), directory.global_depth()).unwrap_or(1));
                }
                partitions.push(PartitionMetrics {
                    partition: p.id().to_string(),
                    records: p.record_count() as u64,
                    buckets: p.bucket_ids().len() as u64,
                    normalized_load: loads.get(&p.id()).copied().unwrap_or(0),
                });
            }
        }
        let target_loads: BTreeMap<PartitionId, u64> =
            self.targets.iter().map(|p| (*p, loads.get(p).copied().unwrap_or(0))).collect();
        let spread = match (target_loads.values().max(), target_loads.values().min()) {
            (Some(a), Some(b)) => a - b,
            _ => 0,
        };
        Metrics {
            seed: self.spec.seed,
            records_live: self.shadow.len() as u64,
            ingest: self.ingest.clone(),
            rebalance: self.rebalance.clone(),
            partitions,
            load_spread: spread,
            largest_bucket_load: largest,
            counters: self.sim.counters().clone(),
            events: self.sim.events_processed(),
            final_tick: self.sim.now(),
            trace_digest: format!("{:016x}", self.sim.trace_digest()),
            verification: None,
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
