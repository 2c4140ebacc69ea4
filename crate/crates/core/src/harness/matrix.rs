//! Crash-matrix runs: one small rebalance per injected crash, each checked
//! for atomicity and lost writes after recovery.

use serde::{Deserialize, Serialize};

use super::workload::{KeyDistribution, WorkloadSpec};
use super::Scenario;
use crate::directory::{GlobalDirectory, PartitionId};
use crate::node::{staged::Staged, Partition};
use crate::rebalance::{CoordinatorLog, LogRecord};
use crate::sim::{ActorId, CrashSpec, SimConfig};

/// Crash points that decide which recovery path runs, with the actor kind
/// that hits them.
pub const CASE_POINTS: &[(&str, bool)] = &[
    ("nc.before-prepare-force", false),
    ("nc.after-prepare-vote", false),
    ("cc.before-commit-force", true),
    ("nc.before-commit-ack", false),
    ("cc.after-commit-force", true),
    ("cc.after-done-force", true),
];

/// Every labeled point a rebalance can reach; `true` marks coordinator
/// points.
pub const ALL_POINTS: &[(&str, bool)] = &[
    ("cc.after-begin-force", true),
    ("cc.before-commit-force", true),
    ("cc.after-commit-force", true),
    ("cc.before-done-force", true),
    ("cc.after-done-force", true),
    ("nc.after-snapshot", false),
    ("nc.before-prepare-force", false),
    ("nc.after-prepare-vote", false),
    ("nc.after-install", false),
    ("nc.before-commit-ack", false),
    ("staged.before-force", false),
    ("partition.after-install-primary", false),
    ("partition.after-install-secondary", false),
    ("partition.after-secondary-mark", false),
    ("secondary.before-force", false),
    ("flush.before-force", false),
    ("wal.before-sync", false),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSetup {
    pub sim: SimConfig,
    pub workload: WorkloadSpec,
    pub targets: Vec<PartitionId>,
    pub max_ticks: u64,
}

impl MatrixSetup {
    /// Two nodes with one partition of four buckets each, rebalanced onto
    /// four nodes.
    pub fn small(seed: u64) -> Self {
        let sim = SimConfig {
            nodes: 4,
            initial_nodes: 2,
            partitions_per_node: 1,
            buckets_per_partition: 4,
            seed,
            scan_batch: 8,
            coordinator_timeout: 400,
            router_retry: 40,
            ..SimConfig::default()
        };
        let workload = WorkloadSpec {
            records: 96,
            keys: KeyDistribution::Sequential,
            payload_bytes: 16,
            secondary_cardinality: 16,
            ingest_batch: 16,
            write_rate: 0.1,
            read_ratio: 0.5,
            seed,
        };
        let targets = sim.partitions_of(4);
        Self { sim, workload, targets, max_ticks: 5_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub case: String,
    pub passed: bool,
    /// Whether the injected crash actually happened.
    pub fired: bool,
    pub committed: Option<bool>,
    pub problems: Vec<String>,
}

/// The events of a crash-free run that belong to the rebalance, as a
/// half-open range of event indexes.
pub fn rebalance_event_range(setup: &MatrixSetup) -> (u64, u64) {
    let mut s = Scenario::new(setup.sim.clone(), setup.workload.clone()).expect("valid setup");
    s.ingest();
    let start = s.sim().events_processed();
    s.rebalance(setup.targets.clone(), setup.max_ticks);
    (start, s.sim().events_processed())
}

pub fn run_case(setup: &MatrixSetup, name: &str, crashes: Vec<CrashSpec>) -> Verdict {
    let mut v = Verdict { case: name.to_string(), passed: false, fired: false, committed: None, problems: Vec::new() };
    let mut s = match Scenario::new(setup.sim.clone(), setup.workload.clone()) {
        Ok(s) => s,
        Err(e) => {
            v.problems.push(format!("setup failed: {e}"));
            return v;
        }
    };
    s.ingest();
    let initial = s.sim().coordinator().expect("up after ingest").directory().clone();
    for c in crashes {
        s.sim_mut().arm(c);
    }
    let r = s.rebalance(setup.targets.clone(), setup.max_ticks);
    if !s.drain(setup.max_ticks) || r.outcome == "timeout" {
        v.problems.push(format!("did not settle: outcome {}", r.outcome));
    }
    v.fired = s.sim().counters().crashes > 0;
    check_atomicity(&s, &initial, &mut v);
    let report = s.verify(16);
    v.problems.extend(report.problems);
    v.passed = v.problems.is_empty();
    v
}

fn check_atomicity(s: &Scenario, initial: &GlobalDirectory, v: &mut Verdict) {
    let sim = s.sim();
    let Some(env) = sim.env(ActorId::Coordinator) else { return };
    let records = match CoordinatorLog::new(env.clone()).read() {
        Ok(r) => r,
        Err(e) => {
            v.problems.push(format!("coordinator log unreadable: {e}"));
            return;
        }
    };
    let mut expected = initial.clone();
    for rec in &records {
        match rec {
            LogRecord::Begin { id, .. } => {
                if !records.iter().any(|r| matches!(r, LogRecord::Done { id: d, .. } if d == id)) {
                    v.problems.push(format!("rebalance {id} has no DONE record"));
                }
            }
            LogRecord::Commit { plan, .. } => {
                expected = plan.new.clone();
                v.committed = Some(true);
            }
            LogRecord::Done { id, committed } => {
                let logged = records.iter().any(|r| matches!(r, LogRecord::Commit { id: c, .. } if c == id));
                if logged != *committed {
                    v.problems.push(format!("DONE of {id} says committed={committed}, COMMIT present={logged}"));
                }
                v.committed.get_or_insert(*committed);
            }
            LogRecord::Init { .. } => {}
        }
    }
    match sim.coordinator() {
        Some(cc) if cc.directory() == &expected => {}
        Some(cc) => v.problems.push(format!(
            "coordinator directory v{} differs from the logged outcome v{}",
            cc.directory().version(),
            expected.version()
        )),
        None => v.problems.push("coordinator is down".into()),
    }
    // Each partition holds exactly the buckets the outcome assigns to it.
    for n in sim.node_ids() {
        let Some(node) = sim.node(n) else { continue };
        for p in node.partitions() {
            let mut have = p.bucket_ids();
            have.sort();
            let mut want: Vec<_> = (0..expected.entries().len() as u64)
                .filter(|slot| expected.entries()[*slot as usize] == p.id())
                .map(|slot| crate::directory::BucketId::new(slot, expected.global_depth()).expect("slot fits"))
                .collect();
            want.sort();
            if have != want {
                v.problems.push(format!("{} holds {have:?}, outcome assigns {want:?}", p.id()));
            }
            let meta = Staged::meta_file(&Partition::prefix_of(p.id()));
            if node.env().storage.get(&meta).ok().flatten().is_some() {
                v.problems.push(format!("{} still has a staged metadata file", p.id()));
            }
        }
    }
}

/// Crashes each actor at each labeled point.
pub fn point_matrix(setup: &MatrixSetup, points: &[(&str, bool)]) -> Vec<Verdict> {
    let mut out = Vec::new();
    for (label, coordinator) in points {
        let actors: Vec<ActorId> = if *coordinator {
            vec![ActorId::Coordinator]
        } else {
            (0..setup.sim.nodes).map(ActorId::Node).collect()
        };
        for actor in actors {
            let spec = CrashSpec::AtPoint { actor, label: label.to_string(), nth: 0 };
            out.push(run_case(setup, &format!("{label}@{actor}"), vec![spec]));
        }
    }
    out
}

/// Crashes each actor before each event of the rebalance.
pub fn event_matrix(setup: &MatrixSetup) -> Vec<Verdict> {
    let (start, end) = rebalance_event_range(setup);
    let mut actors = vec![ActorId::Coordinator];
    actors.extend((0..setup.sim.nodes).map(ActorId::Node));
    let mut out = Vec::new();
    for index in start..end {
        for actor in &actors {
            let spec = CrashSpec::BeforeEvent { actor: *actor, index };
            out.push(run_case(setup, &format!("event{index}@{actor}"), vec![spec]));
        }
    }
    out
}
