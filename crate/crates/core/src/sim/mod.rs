//! Deterministic discrete-event simulation of a cluster: one coordinator,
//! one router and a set of storage nodes exchanging messages over
//! per-channel FIFO links with random latency.
//!
//! Everything is driven by a single seeded RNG and an event queue ordered by
//! `(time, seq)`, so a run is a pure function of its configuration, seed,
//! injected crashes and submitted operations.

pub mod ctx;
pub mod router;

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

pub use ctx::{ActorId, Counters, Ctx, Notice, Timer};
pub use router::{Completion, Router, RouterStats};

use crate::directory::{BucketId, GlobalDirectory, NodeId, PartitionId};
use crate::error::{Error, Result};
use crate::node::PartitionOptions;
use crate::rebalance::{ClientOp, Coordinator, Msg, NodeActor, NodeConfig};
use crate::storage::{Env, MemStorage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Node actors in the cluster, including ones that start empty.
    pub nodes: u32,
    /// Nodes that own data at the start.
    pub initial_nodes: u32,
    pub partitions_per_node: u32,
    pub buckets_per_partition: u32,
    pub seed: u64,
    pub partition: PartitionOptions,
    pub min_latency: u64,
    pub max_latency: u64,
    pub restart_delay: u64,
    pub coordinator_timeout: u64,
    pub router_retry: u64,
    pub scan_batch: usize,
    pub flush_delay: u64,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 5,
            initial_nodes: 4,
            partitions_per_node: 2,
            buckets_per_partition: 4,
            seed: 0,
            partition: PartitionOptions::default(),
            min_latency: 1,
            max_latency: 3,
            restart_delay: 10,
            coordinator_timeout: 2_000,
            router_retry: 50,
            scan_batch: 256,
            flush_delay: 2,
            trace: false,
        }
    }
}

impl SimConfig {
    /// Depth of the initial directory: one slot per initial bucket.
    pub fn initial_depth(&self) -> Result<u32> {
        let buckets = self.initial_nodes as u64 * self.partitions_per_node as u64 * self.buckets_per_partition as u64;
        if buckets == 0 || !buckets.is_power_of_two() {
            return Err(Error::CorruptDirectory(format!(
                "{buckets} initial buckets; the count must be a power of two"
            )));
        }
        Ok(buckets.trailing_zeros())
    }

    pub fn partitions_of(&self, nodes: u32) -> Vec<PartitionId> {
        (0..nodes).flat_map(|n| (0..self.partitions_per_node).map(move |s| PartitionId::new(n, s))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrashSpec {
    /// Crash `actor` on the `nth` (0-based) hit of crash point `label`.
    AtPoint { actor: ActorId, label: String, nth: usize },
    /// Crash `actor` right before the simulator processes event `index`.
    BeforeEvent { actor: ActorId, index: u64 },
}

#[derive(Debug)]
enum EventKind {
    Deliver { from: ActorId, to: ActorId, incarnation: u64, msg: Msg },
    Timer { actor: ActorId, incarnation: u64, timer: Timer },
    Restart { actor: ActorId },
}

#[derive(Debug)]
struct Process {
    env: Env,
    storage: MemStorage,
    incarnation: u64,
    up: bool,
}

impl Process {
    fn new() -> Self {
        let (env, storage) = Env::in_memory();
        Self { env, storage, incarnation: 0, up: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub index: u64,
    pub time: u64,
    pub actor: String,
    pub event: String,
    pub digest: String,
}

pub struct Sim {
    cfg: SimConfig,
    now: u64,
    seq: u64,
    index: u64,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), EventKind>,
    channel_last: HashMap<(ActorId, ActorId), u64>,
    procs: BTreeMap<ActorId, Process>,
    coordinator: Option<Coordinator>,
    nodes: BTreeMap<NodeId, Option<NodeActor>>,
    node_cfgs: BTreeMap<NodeId, NodeConfig>,
    router: Router,
    counters: Counters,
    notices: Vec<(u64, Notice)>,
    event_crashes: Vec<(ActorId, u64)>,
    fatal: Vec<String>,
    trace: Vec<TraceLine>,
    trace_hash: XxHash64,
    next_req: u64,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        if cfg.initial_nodes == 0 || cfg.initial_nodes > cfg.nodes {
            return Err(Error::NoPartitions);
        }
        let depth = cfg.initial_depth()?;
        let initial = cfg.partitions_of(cfg.initial_nodes);
        let directory = GlobalDirectory::round_robin(0, depth, &initial)?;
        let mut owned: BTreeMap<PartitionId, Vec<BucketId>> = BTreeMap::new();
        for (slot, p) in directory.entries().iter().enumerate() {
            owned.entry(*p).or_default().push(BucketId::new(slot as u64, depth)?);
        }

        let mut procs = BTreeMap::new();
        let cc_proc = Process::new();
        let node_ids: Vec<NodeId> = (0..cfg.nodes).collect();
        let coordinator =
            Coordinator::create(cc_proc.env.clone(), directory.clone(), node_ids.clone(), cfg.coordinator_timeout)?;
        procs.insert(ActorId::Coordinator, cc_proc);

        let mut nodes = BTreeMap::new();
        let mut node_cfgs = BTreeMap::new();
        for n in node_ids {
            let p = Process::new();
            let ncfg = NodeConfig {
                id: n,
                partitions: cfg.partitions_per_node,
                opts: cfg.partition.clone(),
                scan_batch: cfg.scan_batch,
                flush_delay: cfg.flush_delay,
            };
            let buckets: BTreeMap<u32, Vec<BucketId>> = owned
                .iter()
                .filter(|(pid, _)| pid.node == n)
                .map(|(pid, b)| (pid.slot, b.clone()))
                .collect();
            nodes.insert(n, Some(NodeActor::create(ncfg.clone(), p.env.clone(), &buckets)?));
            node_cfgs.insert(n, ncfg);
            procs.insert(ActorId::Node(n), p);
        }
        procs.insert(ActorId::Router, Process::new());

        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            router: Router::new(directory, cfg.router_retry),
            cfg,
            now: 0,
            seq: 0,
            index: 0,
            queue: BTreeMap::new(),
            channel_last: HashMap::new(),
            procs,
            coordinator: Some(coordinator),
            nodes,
            node_cfgs,
            counters: Counters::default(),
            notices: Vec::new(),
            event_crashes: Vec::new(),
            fatal: Vec::new(),
            trace: Vec::new(),
            trace_hash: XxHash64::with_seed(0),
            next_req: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.index
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn coordinator(&self) -> Option<&Coordinator> {
        self.coordinator.as_ref()
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeActor> {
        self.nodes.get(&id).and_then(Option::as_ref)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeActor> {
        self.nodes.get_mut(&id).and_then(Option::as_mut)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn storage(&self, actor: ActorId) -> Option<&MemStorage> {
        self.procs.get(&actor).map(|p| &p.storage)
    }

    pub fn env(&self, actor: ActorId) -> Option<&Env> {
        self.procs.get(&actor).map(|p| &p.env)
    }

    pub fn is_up(&self, actor: ActorId) -> bool {
        self.procs.get(&actor).is_some_and(|p| p.up)
    }

    pub fn all_up(&self) -> bool {
        self.procs.values().all(|p| p.up)
    }

    /// Errors that kept an actor from recovering.
    pub fn fatal_errors(&self) -> &[String] {
        &self.fatal
    }

    pub fn trace(&self) -> &[TraceLine] {
        &self.trace
    }

    /// Hash over every processed event and the resulting actor state.
    pub fn trace_digest(&self) -> u64 {
        self.trace_hash.finish()
    }

    pub fn take_notices(&mut self) -> Vec<(u64, Notice)> {
        std::mem::take(&mut self.notices)
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        self.router.take_completions()
    }

    /// Messages and restarts still pending; stale timers do not count.
    pub fn pending_work(&self) -> usize {
        self.queue
            .values()
            .filter(|e| match e {
                EventKind::Deliver { .. } | EventKind::Restart { .. } => true,
                EventKind::Timer { actor, incarnation, timer } => {
                    matches!(timer, Timer::FlushDone { .. } | Timer::ScanNext { .. })
                        && self.procs.get(actor).is_some_and(|p| p.incarnation == *incarnation)
                }
            })
            .count()
    }

    pub fn arm(&mut self, spec: CrashSpec) {
        match spec {
            CrashSpec::AtPoint { actor, label, nth } => {
                if let Some(p) = self.procs.get(&actor) {
                    p.env.crash.arm(&label, nth);
                }
            }
            CrashSpec::BeforeEvent { actor, index } => self.event_crashes.push((actor, index)),
        }
    }

    /// Hands a client operation to the router. Returns `None` while another
    /// operation on the same key is in flight.
    pub fn submit(&mut self, op: ClientOp) -> Option<u64> {
        let req = self.next_req;
        let mut ctx = Ctx::new(self.now, ActorId::Router, &mut self.counters);
        let accepted = self.router.submit(&mut ctx, req, op);
        let out = Outputs::take(ctx);
        self.apply(ActorId::Router, out);
        accepted.then(|| {
            self.next_req += 1;
            req
        })
    }

    pub fn start_rebalance(&mut self, targets: Vec<PartitionId>) {
        self.send(ActorId::Harness, ActorId::Coordinator, Msg::StartRebalance { targets });
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.insert((time, self.seq), kind);
    }

    fn send(&mut self, from: ActorId, to: ActorId, msg: Msg) {
        let latency = self.rng.gen_range(self.cfg.min_latency.max(1)..=self.cfg.max_latency.max(self.cfg.min_latency.max(1)));
        let last = self.channel_last.entry((from, to)).or_insert(0);
        let time = (self.now + latency).max(*last);
        *last = time;
        let incarnation = self.procs.get(&to).map_or(0, |p| p.incarnation);
        self.push(time, EventKind::Deliver { from, to, incarnation, msg });
    }

    fn apply(&mut self, actor: ActorId, out: Outputs) {
        for (to, msg) in out.outbox {
            self.send(actor, to, msg);
        }
        let (up, incarnation) = self.procs.get(&actor).map_or((true, 0), |p| (p.up, p.incarnation));
        if up && incarnation == out.incarnation {
            for (delay, timer) in out.timers {
                self.push(self.now + delay, EventKind::Timer { actor, incarnation, timer });
            }
        }
        self.notices.extend(out.notices);
    }

    /// Processes events up to and including time `t`, then sets the clock
    /// to `t`.
    pub fn run_until(&mut self, t: u64) {
        while self.queue.first_key_value().is_some_and(|((time, _), _)| *time <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Processes the next event. Returns `false` if the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((time, _), kind)) = self.queue.pop_first() else {
            return false;
        };
        self.now = self.now.max(time);
        let index = self.index;
        self.index += 1;
        let due: Vec<ActorId> =
            self.event_crashes.iter().filter(|(_, i)| *i == index).map(|(a, _)| *a).collect();
        for a in due {
            self.crash(a);
        }
        let (actor, label) = match kind {
            EventKind::Deliver { from, to, incarnation, msg } => {
                let label = format!("{}<-{}", msg.kind(), from);
                if !self.procs.get(&to).is_some_and(|p| p.up && p.incarnation == incarnation) {
                    self.counters.dropped_messages += 1;
                    (to, format!("drop {label}"))
                } else {
                    self.dispatch(to, |a, ctx| a.handle(ctx, from, msg));
                    (to, label)
                }
            }
            EventKind::Timer { actor, incarnation, timer } => {
                let label = format!("timer {timer:?}");
                if self.procs.get(&actor).is_some_and(|p| p.up && p.incarnation == incarnation) {
                    self.dispatch(actor, |a, ctx| a.on_timer(ctx, timer));
                }
                (actor, label)
            }
            EventKind::Restart { actor } => {
                self.restart(actor);
                (actor, "restart".to_string())
            }
        };
        self.record(index, actor, label);
        true
    }

    fn record(&mut self, index: u64, actor: ActorId, event: String) {
        let digest = self.digest_of(actor);
        self.trace_hash.write_u64(index);
        self.trace_hash.write_u64(self.now);
        self.trace_hash.write(actor.to_string().as_bytes());
        self.trace_hash.write(event.as_bytes());
        self.trace_hash.write(digest.as_bytes());
        if self.cfg.trace {
            self.trace.push(TraceLine { index, time: self.now, actor: actor.to_string(), event, digest });
        }
    }

    fn digest_of(&self, actor: ActorId) -> String {
        match actor {
            ActorId::Coordinator => self.coordinator.as_ref().map_or("down".into(), |c| c.digest()),
            ActorId::Router => self.router.digest(),
            ActorId::Node(n) => self.node(n).map_or("down".into(), |a| a.digest()),
            ActorId::Harness => String::new(),
        }
    }

    fn dispatch(&mut self, actor: ActorId, f: impl FnOnce(Handler<'_>, &mut Ctx<'_>) -> Result<()>) {
        let incarnation = self.procs.get(&actor).map_or(0, |p| p.incarnation);
        let mut ctx = Ctx::new(self.now, actor, &mut self.counters);
        let handler = match actor {
            ActorId::Coordinator => self.coordinator.as_mut().map(Handler::Coordinator),
            ActorId::Router => Some(Handler::Router(&mut self.router)),
            ActorId::Node(n) => self.nodes.get_mut(&n).and_then(Option::as_mut).map(Handler::Node),
            ActorId::Harness => None,
        };
        let result = match handler {
            Some(h) => f(h, &mut ctx),
            None => Ok(()),
        };
        let mut out = Outputs::take(ctx);
        out.incarnation = incarnation;
        match result {
            Ok(()) => {}
            Err(e) if e.is_crash() => {
                self.apply_sends_only(actor, &mut out);
                self.crash(actor);
            }
            Err(e) => out.notices.push((self.now, Notice::HandlerError { actor, error: e.to_string() })),
        }
        self.apply(actor, out);
    }

    fn apply_sends_only(&mut self, actor: ActorId, out: &mut Outputs) {
        for (to, msg) in std::mem::take(&mut out.outbox) {
            self.send(actor, to, msg);
        }
    }

    /// Takes `actor` down: unsynced data is lost and its in-memory state is
    /// dropped without cleanup. It comes back after the restart delay.
    pub fn crash(&mut self, actor: ActorId) {
        if matches!(actor, ActorId::Router | ActorId::Harness) {
            return;
        }
        let Some(p) = self.procs.get_mut(&actor) else {
            return;
        };
        if !p.up {
            return;
        }
        p.up = false;
        p.incarnation += 1;
        p.env.kill();
        p.storage.crash();
        self.counters.crashes += 1;
        match actor {
            ActorId::Coordinator => self.coordinator = None,
            ActorId::Node(n) => {
                self.nodes.insert(n, None);
            }
            _ => {}
        }
        self.push(self.now + self.cfg.restart_delay.max(1), EventKind::Restart { actor });
    }

    fn restart(&mut self, actor: ActorId) {
        let Some(p) = self.procs.get_mut(&actor) else {
            return;
        };
        if p.up {
            return;
        }
        p.env = p.env.restart();
        p.up = true;
        let env = p.env.clone();
        let incarnation = p.incarnation;
        let mut ctx = Ctx::new(self.now, actor, &mut self.counters);
        let result = match actor {
            ActorId::Coordinator => {
                let nodes = self.nodes.keys().copied().collect();
                Coordinator::recover(env, nodes, self.cfg.coordinator_timeout, &mut ctx)
                    .map(|c| self.coordinator = Some(c))
            }
            ActorId::Node(n) => NodeActor::recover(self.node_cfgs[&n].clone(), env, &mut ctx).map(|a| {
                self.nodes.insert(n, Some(a));
            }),
            _ => Ok(()),
        };
        let mut out = Outputs::take(ctx);
        out.incarnation = incarnation;
        match result {
            Ok(()) => {
                out.notices.push((self.now, Notice::Recovered { actor }));
                self.apply(actor, out);
            }
            Err(e) if e.is_crash() => {
                self.apply_sends_only(actor, &mut out);
                self.procs.get_mut(&actor).expect("exists").up = true;
                self.crash(actor);
            }
            Err(e) => {
                self.fatal.push(format!("{actor} failed to recover: {e}"));
                let p = self.procs.get_mut(&actor).expect("exists");
                p.up = false;
                p.incarnation += 1;
            }
        }
    }
}

enum Handler<'a> {
    Coordinator(&'a mut Coordinator),
    Router(&'a mut Router),
    Node(&'a mut NodeActor),
}

impl Handler<'_> {
    fn handle(self, ctx: &mut Ctx<'_>, from: ActorId, msg: Msg) -> Result<()> {
        match self {
            Handler::Coordinator(c) => c.handle(ctx, msg),
            Handler::Router(r) => {
                r.handle(ctx, msg);
                Ok(())
            }
            Handler::Node(n) => n.handle(ctx, from, msg),
        }
    }

    fn on_timer(self, ctx: &mut Ctx<'_>, timer: Timer) -> Result<()> {
        match self {
            Handler::Coordinator(c) => c.on_timer(ctx, timer),
            Handler::Router(r) => {
                r.on_timer(ctx, timer);
                Ok(())
            }
            Handler::Node(n) => n.on_timer(ctx, timer),
        }
    }
}

struct Outputs {
    outbox: Vec<(ActorId, Msg)>,
    timers: Vec<(u64, Timer)>,
    notices: Vec<(u64, Notice)>,
    incarnation: u64,
}

impl Outputs {
    fn take(ctx: Ctx<'_>) -> Self {
        Self { outbox: ctx.outbox, timers: ctx.timers, notices: ctx.notices, incarnation: 0 }
    }
}
