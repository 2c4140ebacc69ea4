//! Checks shared by the integration tests and the acceptance runner. Each
//! `criterion_*` function runs one end-to-end check and reports what it saw.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lsm_rebalance::directory::{balance, hash_key, BalanceStep};
use lsm_rebalance::harness::matrix::{event_matrix, point_matrix, MatrixSetup, ALL_POINTS, CASE_POINTS};
use lsm_rebalance::harness::{ClusterConfig, Scenario};
use lsm_rebalance::lsm::MergeRecord;
use lsm_rebalance::node::{Partition, PartitionOptions, Record, WriteOp};
use lsm_rebalance::rebalance::LogRecord;
use lsm_rebalance::storage::Env;
use lsm_rebalance::{BucketId, PartitionId};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(problems: Vec<String>, summary: String) -> Self {
        if problems.is_empty() {
            Outcome { passed: true, detail: summary }
        } else {
            let shown: Vec<_> = problems.iter().take(5).cloned().collect();
            Outcome { passed: false, detail: format!("{summary}; {} problem(s): {}", problems.len(), shown.join(" | ")) }
        }
    }
}

// ---------------------------------------------------------------------------
// balance oracle

/// Random complete bucket set: start from the root and split random buckets
/// until `count` buckets exist, never deeper than `max_depth`.
pub fn random_buckets(rng: &mut ChaCha8Rng, count: usize, max_depth: u32) -> Vec<BucketId> {
    let mut set = vec![BucketId::root()];
    while set.len() < count {
        let splittable: Vec<usize> = (0..set.len()).filter(|i| set[*i].depth() < max_depth).collect();
        let Some(&i) = splittable.choose(rng) else { break };
        let (l, r) = set.swap_remove(i).split();
        set.push(l);
        set.push(r);
    }
    set.sort();
    set
}

fn partitions(nodes: &[u32], per_node: u32) -> Vec<PartitionId> {
    nodes.iter().flat_map(|n| (0..per_node).map(move |s| PartitionId::new(*n, s))).collect()
}

/// One balance input: an existing placement plus the target partition set
/// after a node was added or removed.
#[derive(Clone, Debug)]
pub struct BalanceCase {
    pub buckets: BTreeMap<BucketId, Option<PartitionId>>,
    pub targets: Vec<PartitionId>,
    pub depth: u32,
}

pub fn random_case(seed: u64, max_buckets: usize, max_depth: u32) -> BalanceCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(2..=max_buckets);
    let set = random_buckets(&mut rng, count, max_depth);
    let node_count = rng.gen_range(2..=5u32);
    let per_node = rng.gen_range(1..=2u32);
    let nodes: Vec<u32> = (0..node_count).collect();
    let before = partitions(&nodes, per_node);
    let buckets: BTreeMap<_, _> = set.iter().map(|b| (*b, Some(*before.choose(&mut rng).unwrap()))).collect();
    let targets = if rng.gen_bool(0.5) {
        let mut n = nodes.clone();
        n.push(node_count);
        partitions(&n, per_node)
    } else {
        let gone = rng.gen_range(0..node_count);
        let n: Vec<u32> = nodes.into_iter().filter(|x| *x != gone).collect();
        partitions(&n, per_node)
    };
    let depth = set.iter().map(|b| b.depth()).max().unwrap_or(0);
    BalanceCase { buckets, targets, depth }
}

/// Step-by-step transcription of the greedy pseudocode. Loads are recomputed
/// from scratch on every step.
pub fn reference_balance(case: &BalanceCase) -> (BTreeMap<BucketId, PartitionId>, Vec<BalanceStep>) {
    let size = |b: &BucketId| 1u64 << (case.depth - b.depth());
    let mut owner: BTreeMap<BucketId, Option<PartitionId>> = case
        .buckets
        .iter()
        .map(|(b, p)| (*b, p.filter(|p| case.targets.contains(p))))
        .collect();
    let load = |owner: &BTreeMap<BucketId, Option<PartitionId>>, p: PartitionId| -> u64 {
        owner.iter().filter(|(_, o)| **o == Some(p)).map(|(b, _)| size(b)).sum()
    };
    let node_load = |owner: &BTreeMap<BucketId, Option<PartitionId>>, n: u32| -> u64 {
        case.targets.iter().filter(|p| p.node == n).map(|p| load(owner, *p)).sum()
    };
    let least = |owner: &BTreeMap<BucketId, Option<PartitionId>>| -> PartitionId {
        let mut best = case.targets[0];
        for p in &case.targets {
            let a = (load(owner, *p), node_load(owner, p.node));
            let b = (load(owner, best), node_load(owner, best.node));
            if a < b || (a == b && *p < best) {
                best = *p;
            }
        }
        best
    };
    let most = |owner: &BTreeMap<BucketId, Option<PartitionId>>| -> PartitionId {
        let mut best = case.targets[0];
        for p in &case.targets {
            let a = (load(owner, *p), node_load(owner, p.node));
            let b = (load(owner, best), node_load(owner, best.node));
            if a > b || (a == b && *p < best) {
                best = *p;
            }
        }
        best
    };

    let mut trace = Vec::new();
    let mut unassigned: Vec<BucketId> = owner.iter().filter(|(_, o)| o.is_none()).map(|(b, _)| *b).collect();
    unassigned.sort_by(|a, b| size(b).cmp(&size(a)).then(a.cmp(b)));
    for b in unassigned {
        let to = least(&owner);
        owner.insert(b, Some(to));
        trace.push(BalanceStep::Place { bucket: b, to });
    }
    loop {
        let p_max = most(&owner);
        let mine: Vec<BucketId> = owner.iter().filter(|(_, o)| **o == Some(p_max)).map(|(b, _)| *b).collect();
        let Some(b) = mine.iter().copied().min_by(|x, y| size(x).cmp(&size(y)).then(x.cmp(y))) else { break };
        let p_min = least(&owner);
        let max = load(&owner, p_max) as i64;
        let min = load(&owner, p_min) as i64;
        let s = size(&b) as i64;
        if ((max - s) - (min + s)).abs() < max - min {
            owner.insert(b, Some(p_min));
            trace.push(BalanceStep::Move { bucket: b, from: p_max, to: p_min });
        } else {
            break;
        }
    }
    (owner.into_iter().map(|(b, p)| (b, p.expect("placed"))).collect(), trace)
}

/// Twenty small instances: the three worked examples and seventeen seeded
/// ones with at most eight buckets of depth at most three.
pub fn hand_instances() -> Vec<BalanceCase> {
    let b = |bits, d| BucketId::new(bits, d).unwrap();
    let p = |n| PartitionId::new(n, 0);
    let mut out = vec![
        BalanceCase {
            buckets: (0..4).map(|i| (b(i, 2), None)).collect(),
            targets: vec![p(0), p(1)],
            depth: 2,
        },
        BalanceCase {
            buckets: (0..4).map(|i| (b(i, 2), Some(p(0)))).collect(),
            targets: vec![p(0), p(1)],
            depth: 2,
        },
        BalanceCase {
            buckets: [(0b000, 0), (0b001, 0), (0b010, 0), (0b011, 2), (0b100, 2), (0b101, 1)]
                .into_iter()
                .map(|(bits, n)| (b(bits, 3), Some(p(n))))
                .collect(),
            targets: vec![p(0), p(2)],
            depth: 3,
        },
    ];
    out.extend((1000..1017).map(|s| random_case(s, 8, 3)));
    out
}

pub fn criterion_2() -> Outcome {
    let mut problems = Vec::new();
    let mut moves = 0;
    for seed in 0..100u64 {
        let case = random_case(seed, 40, 6);
        let a = match balance(&case.buckets, &case.targets, case.depth) {
            Ok(a) => a,
            Err(e) => {
                problems.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        moves += a.trace.len();
        let loads = a.partition_loads(&case.targets);
        let spread = loads.values().max().unwrap() - loads.values().min().unwrap();
        let largest = case.buckets.keys().map(|b| 1u64 << (case.depth - b.depth())).max().unwrap();
        if spread > largest {
            problems.push(format!("seed {seed}: spread {spread} > largest bucket {largest}"));
        }
        if a.buckets.len() != case.buckets.len() || a.buckets.values().any(|p| !case.targets.contains(p)) {
            problems.push(format!("seed {seed}: assignment lost buckets or used a removed partition"));
        }
        let (owners, trace) = reference_balance(&case);
        if a.trace != trace || a.buckets != owners {
            problems.push(format!("seed {seed}: trace differs from the reference"));
        }
    }
    let hand = hand_instances();
    for (i, case) in hand.iter().enumerate() {
        let a = balance(&case.buckets, &case.targets, case.depth).expect("valid instance");
        let (owners, trace) = reference_balance(case);
        if a.trace != trace || a.buckets != owners {
            problems.push(format!("instance {i}: trace {:?} vs reference {:?}", a.trace, trace));
        }
    }
    Outcome::new(problems, format!("100 random instances ({moves} steps), {} traced instances", hand.len()))
}

// ---------------------------------------------------------------------------
// cluster scenarios

pub fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = ClusterConfig::default();
    let mut problems = Vec::new();
    let mut s = Scenario::from_config(&cfg).expect("default config is valid");
    s.ingest();
    let loaded = s.shadow().clone();
    let r = s.rebalance(cfg.sim.partitions_of(cfg.sim.initial_nodes + 1), cfg.max_rebalance_ticks);
    s.drain(cfg.max_rebalance_ticks);
    let v = s.verify(cfg.verify_probes);
    let elapsed = start.elapsed();

    // global hashing over the records present when the rebalance starts
    let (before, after) = (cfg.sim.initial_nodes as u64, cfg.sim.initial_nodes as u64 + 1);
    let total = loaded.len() as f64;
    let baseline = loaded.records().filter(|r| hash_key(&r.key) % before != hash_key(&r.key) % after).count() as f64 / total;

    if r.outcome != "committed" {
        problems.push(format!("outcome {}", r.outcome));
    }
    if !v.passed {
        problems.push(format!("verify failed: {:?}", v.problems));
    }
    if r.moved_fraction > 0.30 {
        problems.push(format!("moved fraction {:.4} > 0.30", r.moved_fraction));
    }
    if baseline < 0.70 {
        problems.push(format!("baseline fraction {baseline:.4} < 0.70"));
    }
    if (baseline - r.baseline_fraction).abs() > 1e-9 {
        problems.push(format!("reported baseline {:.4} differs from {baseline:.4}", r.baseline_fraction));
    }
    if r.moved_fraction >= 0.5 * baseline {
        problems.push(format!("moved fraction {:.4} not below half the baseline", r.moved_fraction));
    }
    if elapsed >= Duration::from_secs(60) {
        problems.push(format!("took {elapsed:?}"));
    }
    Outcome::new(
        problems,
        format!(
            "moved {:.4} ({} records, {}/{} buckets), baseline {baseline:.4}, {:.1}s",
            r.moved_fraction,
            r.records_moved,
            r.buckets_moved,
            r.buckets_total,
            elapsed.as_secs_f64()
        ),
    )
}

/// Default desk-scale cluster with a fixed seed and concurrent writes at a
/// tenth of the ingest rate.
pub fn concurrency_config(seed: u64) -> ClusterConfig {
    let mut cfg = ClusterConfig::default();
    cfg.sim.seed = seed;
    cfg.workload.seed = seed;
    cfg.workload.write_rate = 0.1;
    cfg
}

pub fn run_concurrent(seed: u64) -> Result<String, String> {
    let cfg = concurrency_config(seed);
    let mut s = Scenario::from_config(&cfg).map_err(|e| e.to_string())?;
    s.ingest();
    let r = s.rebalance(cfg.sim.partitions_of(cfg.sim.initial_nodes + 1), cfg.max_rebalance_ticks);
    if !s.drain(cfg.max_rebalance_ticks) {
        return Err(format!("seed {seed}: did not settle"));
    }
    if r.outcome != "committed" {
        return Err(format!("seed {seed}: outcome {}", r.outcome));
    }
    if r.concurrent_writes == 0 {
        return Err(format!("seed {seed}: no concurrent writes issued"));
    }
    let v = s.verify(cfg.verify_probes);
    if !v.passed {
        return Err(format!("seed {seed}: {:?}", v.problems));
    }
    Ok(format!("{} writes, {} replicated", r.concurrent_writes, r.replicated_writes))
}

pub fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    for seed in 0..25 {
        if let Err(e) = run_concurrent(seed) {
            problems.push(e);
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(300) {
        problems.push(format!("took {elapsed:?}"));
    }
    Outcome::new(problems, format!("25 seeds, {:.1}s", elapsed.as_secs_f64()))
}

pub fn criterion_4() -> Outcome {
    let setup = MatrixSetup::small(1);
    let mut problems = Vec::new();
    let points = point_matrix(&setup, ALL_POINTS);
    for (label, _) in CASE_POINTS {
        if !points.iter().any(|v| v.case.starts_with(&format!("{label}@")) && v.fired) {
            problems.push(format!("{label} never fired"));
        }
    }
    let fired = ALL_POINTS
        .iter()
        .filter(|(l, _)| points.iter().any(|v| v.case.starts_with(&format!("{l}@")) && v.fired))
        .count();
    let events = event_matrix(&setup);
    for v in points.iter().chain(&events) {
        if !v.passed {
            problems.push(format!("{}: {:?}", v.case, v.problems));
        }
    }
    let committed = points.iter().chain(&events).filter(|v| v.committed == Some(true)).count();
    let aborted = points.iter().chain(&events).filter(|v| v.committed == Some(false)).count();
    Outcome::new(
        problems,
        format!(
            "{} point cases ({fired}/{} labels fired), {} event cases, {committed} committed, {aborted} aborted",
            points.len(),
            ALL_POINTS.len(),
            events.len()
        ),
    )
}

pub fn criterion_6() -> Outcome {
    let mut problems = Vec::new();
    let mut checked_keys = 0;
    let mut lazily_kept = 0;
    for seed in 0..4 {
        let mut setup = MatrixSetup::small(seed);
        setup.workload.records = 512;
        setup.workload.write_rate = 0.0;
        let mut s = Scenario::new(setup.sim.clone(), setup.workload.clone()).expect("valid setup");
        s.ingest();
        let merges_before = secondary_merges(&s);
        let r = s.rebalance(setup.targets.clone(), setup.max_ticks);
        s.drain(setup.max_ticks);
        if r.outcome != "committed" {
            problems.push(format!("seed {seed}: outcome {}", r.outcome));
            continue;
        }
        if secondary_merges(&s) != merges_before {
            problems.push(format!("seed {seed}: a secondary merge ran during the rebalance"));
        }
        let moves = committed_moves(&s);
        for m in &moves {
            let node = s.sim().node(m.1.node).expect("source up");
            let p = node.partition(m.1.slot).expect("source partition");
            let hits = p.secondary_query(b"", b"\xff").expect("query");
            let leaked = hits.iter().filter(|r| m.0.contains_key(&r.key)).count();
            checked_keys += s.shadow().records().filter(|r| m.0.contains_key(&r.key)).count();
            if leaked > 0 {
                problems.push(format!("seed {seed}: {} returned {leaked} moved records", p.id()));
            }
            lazily_kept += p.secondary().physical_entries_in(m.0);
        }
        // force merges on the sources
        for m in &moves {
            let node = s.sim_mut().node_mut(m.1.node).expect("source up");
            node.partition_mut(m.1.slot).expect("source partition").compact().expect("compaction");
        }
        for m in &moves {
            let p = s.sim().node(m.1.node).unwrap().partition(m.1.slot).unwrap();
            let left = p.secondary().physical_entries_in(m.0);
            if left > 0 {
                problems.push(format!("seed {seed}: {left} entries of {} remain in {} after merging", m.0, p.id()));
            }
        }
        let v = s.verify(16);
        if !v.passed {
            problems.push(format!("seed {seed}: verify {:?}", v.problems));
        }
    }
    if lazily_kept == 0 {
        problems.push("no secondary entries of moved buckets were left behind, cleanup was not lazy".into());
    }
    Outcome::new(
        problems,
        format!("{checked_keys} moved keys hidden while {lazily_kept} entries stayed on disk, 0 after merging"),
    )
}

fn secondary_merges(s: &Scenario) -> usize {
    s.sim()
        .node_ids()
        .into_iter()
        .filter_map(|n| s.sim().node(n))
        .flat_map(|n| n.partitions().map(|p| p.secondary().merge_log().len()).collect::<Vec<_>>())
        .sum()
}

/// `(bucket, source)` of every move in the committed plan.
pub fn committed_moves(s: &Scenario) -> Vec<(BucketId, PartitionId, PartitionId)> {
    let log = s.sim().coordinator().expect("coordinator up").log().read().expect("log readable");
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Commit { plan, .. } => Some(plan.moves.iter().map(|m| (m.bucket, m.from, m.to)).collect::<Vec<_>>()),
            _ => None,
        })
        .next_back()
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// single partition properties

fn pk(i: u32) -> Bytes {
    Bytes::copy_from_slice(&i.to_be_bytes())
}

fn pid() -> PartitionId {
    PartitionId::new(0, 0)
}

fn small_opts() -> PartitionOptions {
    let mut o = PartitionOptions { memory_budget_bytes: 4096, ..Default::default() };
    o.lsm.split_threshold_bytes = 6 * 1024;
    o
}

/// Random write against a shadow map.
fn random_write(rng: &mut ChaCha8Rng, keys: u32, shadow: &mut BTreeMap<Bytes, Record>) -> WriteOp {
    let key = pk(rng.gen_range(0..keys));
    if rng.gen_bool(0.2) {
        shadow.remove(&key);
        WriteOp::Delete { key }
    } else {
        let payload = Bytes::from(format!("v{}", rng.gen::<u32>()));
        let secondary = Some(Bytes::from(format!("s{}", rng.gen_range(0..16))));
        shadow.insert(key.clone(), Record { key: key.clone(), payload: payload.clone(), secondary: secondary.clone() });
        WriteOp::Put { key, payload, secondary }
    }
}

const SPLIT_POINTS: &[&str] = &[
    "split.after-merge-pause",
    "flush.before-force",
    "split.after-async-flush",
    "split.after-sync-flush",
    "split.after-children-created",
    "split.after-metadata-force",
];

/// Buckets cover the hash space exactly once.
fn check_cover(ids: &[BucketId]) -> Result<(), String> {
    for (i, a) in ids.iter().enumerate() {
        if let Some(b) = ids[i + 1..].iter().find(|b| a.overlaps(b)) {
            return Err(format!("{a} overlaps {b}"));
        }
    }
    let covered: u128 = ids.iter().map(|b| 1u128 << (64 - b.depth())).sum();
    if covered != 1u128 << 64 {
        return Err(format!("buckets {ids:?} leave gaps"));
    }
    Ok(())
}

fn compare(p: &Partition, shadow: &BTreeMap<Bytes, Record>, keys: u32) -> Result<(), String> {
    for i in 0..keys {
        let k = pk(i);
        let got = p.point_lookup(&k).map_err(|e| e.to_string())?;
        if got.as_ref() != shadow.get(&k) {
            return Err(format!("lookup {i}: got {got:?}, expected {:?}", shadow.get(&k)));
        }
    }
    let all = p.all_records().map_err(|e| e.to_string())?;
    let want: Vec<Record> = shadow.values().cloned().collect();
    if all != want {
        return Err(format!("full scan returned {} records, expected {}", all.len(), want.len()));
    }
    Ok(())
}

/// Every on-disk component of every bucket stays inside the bucket: plain
/// components hold only its keys, references are filtered to it.
fn check_filters(p: &Partition, require_plain: bool) -> Result<(), String> {
    for id in p.bucket_ids() {
        let bucket = p.primary().bucket(id).expect("listed bucket");
        for c in bucket.components().iter() {
            if c.is_reference() {
                if require_plain {
                    return Err(format!("{id} still reads through a reference after merging"));
                }
                if c.filter() != Some(id) {
                    return Err(format!("{id} holds a reference filtered to {:?}", c.filter()));
                }
            } else if let Some(e) = c.target().entries().iter().find(|e| !id.contains_key(&e.key)) {
                return Err(format!("{id} component {} holds foreign key {:?}", c.target().file(), e.key));
            }
        }
    }
    Ok(())
}

/// One seeded split run: random writes with forced splits, a crash inside
/// one split followed by recovery, then merges. Returns whether the injected
/// crash fired.
pub fn split_case(seed: u64) -> Result<bool, String> {
    const KEYS: u32 = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (env, mem) = Env::in_memory();
    let opts = small_opts();
    let mut p = Partition::create(env.clone(), pid(), opts.clone(), &[BucketId::root()]).map_err(|e| e.to_string())?;
    let mut env = env;
    let mut shadow = BTreeMap::new();
    let crash_at = rng.gen_range(50..250);
    let mut fired = false;
    for step in 0..300 {
        if step == crash_at {
            let ids = p.bucket_ids();
            let victim = **ids.iter().filter(|b| b.depth() < 8).collect::<Vec<_>>().choose(&mut rng).ok_or("no splittable bucket")?;
            let label = SPLIT_POINTS.choose(&mut rng).unwrap();
            env.crash.arm(label, 0);
            let res = p.split_bucket(victim);
            env.crash.disarm();
            let crashed = match res {
                Err(e) if e.is_crash() => true,
                Err(e) => return Err(format!("split of {victim} failed: {e}")),
                Ok(_) => false,
            };
            if crashed {
                fired = true;
                env.kill();
                mem.crash();
                env = env.restart();
                let (r, _) = Partition::recover(env.clone(), pid(), opts.clone()).map_err(|e| format!("recovery after {label}: {e}"))?;
                p = r;
                let ids = p.bucket_ids();
                let (l, rr) = victim.split();
                let parent = ids.contains(&victim);
                let children = (ids.contains(&l), ids.contains(&rr));
                match (parent, children) {
                    (true, (false, false)) | (false, (true, true)) => {}
                    _ => return Err(format!("crash at {label}: parent {parent}, children {children:?}")),
                }
                check_cover(&ids).map_err(|e| format!("crash at {label}: {e}"))?;
                compare(&p, &shadow, KEYS).map_err(|e| format!("after crash at {label}: {e}"))?;
            }
            continue;
        }
        match rng.gen_range(0..100) {
            0..=3 => p.flush_all().map_err(|e| e.to_string())?,
            4..=7 => {
                let ids: Vec<_> = p.bucket_ids().into_iter().filter(|b| b.depth() < 8).collect();
                if let Some(b) = ids.choose(&mut rng) {
                    p.split_bucket(*b).map_err(|e| format!("split {b}: {e}"))?;
                }
            }
            _ => {
                let op = random_write(&mut rng, KEYS, &mut shadow);
                p.apply_write(op).map_err(|e| e.to_string())?;
            }
        }
    }
    check_cover(&p.bucket_ids())?;
    compare(&p, &shadow, KEYS)?;
    check_filters(&p, false)?;
    p.quiesce().map_err(|e| e.to_string())?;
    check_filters(&p, false)?;
    p.compact().map_err(|e| e.to_string())?;
    check_filters(&p, true)?;
    compare(&p, &shadow, KEYS)?;
    let (r, _) = Partition::recover(env.restart(), pid(), opts).map_err(|e| e.to_string())?;
    compare(&r, &shadow, KEYS)?;
    Ok(fired)
}

pub fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    let mut crashes = 0;
    for seed in 0..200 {
        match split_case(seed) {
            Ok(fired) => crashes += fired as usize,
            Err(e) => problems.push(format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    if crashes < 100 {
        problems.push(format!("only {crashes} seeds crashed inside a split"));
    }
    if elapsed >= Duration::from_secs(120) {
        problems.push(format!("took {elapsed:?}"));
    }
    Outcome::new(problems, format!("200 seeds, {crashes} crashed inside a split, {:.1}s", elapsed.as_secs_f64()))
}

/// Populates a partition with random writes, flushes and splits.
pub fn populated_partition(seed: u64, keys: u32, writes: usize) -> (Partition, BTreeMap<Bytes, Record>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (env, _) = Env::in_memory();
    let mut p = Partition::create(env, pid(), small_opts(), &[BucketId::root()]).unwrap();
    let mut shadow = BTreeMap::new();
    for _ in 0..writes {
        let op = random_write(&mut rng, keys, &mut shadow);
        p.apply_write(op).unwrap();
    }
    (p, shadow)
}

pub fn scan_case(seed: u64) -> Result<usize, String> {
    const KEYS: u32 = 3000;
    let (p, shadow) = populated_partition(seed, KEYS, 6000);
    if p.bucket_ids().len() < 2 {
        return Err("no splits happened".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7);
    let mut total = 0;
    for _ in 0..100 {
        let a = rng.gen_range(0..KEYS + 10);
        let b = rng.gen_range(0..KEYS + 10);
        let (lo, hi) = (pk(a.min(b)), pk(a.max(b)));
        let ordered = p.range_scan(&lo, &hi, true).map_err(|e| e.to_string())?;
        let mut unordered = p.range_scan(&lo, &hi, false).map_err(|e| e.to_string())?;
        unordered.sort_by(|x, y| x.key.cmp(&y.key));
        let want: Vec<Record> = shadow.range(lo.clone()..=hi.clone()).map(|(_, r)| r.clone()).collect();
        if ordered != unordered {
            return Err(format!("range {a}..={b}: ordered and sorted unordered scans differ"));
        }
        if ordered != want {
            return Err(format!("range {a}..={b}: {} records, shadow has {}", ordered.len(), want.len()));
        }
        total += ordered.len();
    }
    Ok(total)
}

pub fn criterion_7() -> Outcome {
    let mut problems = Vec::new();
    let mut rows = 0;
    for seed in 0..5 {
        match scan_case(seed) {
            Ok(n) => rows += n,
            Err(e) => problems.push(format!("seed {seed}: {e}")),
        }
    }
    Outcome::new(problems, format!("5 seeds x 100 ranges, {rows} rows compared"))
}

// ---------------------------------------------------------------------------
// merge policy

/// `younger >= 1.2 * oldest`, in integers.
fn tiered(younger: u64, oldest: u64) -> bool {
    5 * younger as u128 >= 6 * oldest as u128
}

/// Checks one executed merge against the sizes it was decided on.
pub fn check_merge(m: &MergeRecord) -> Result<(), String> {
    let i = m.oldest_index;
    if i == 0 || i >= m.sizes.len() {
        return Err(format!("{}: oldest index {i} out of range for {:?}", m.bucket, m.sizes));
    }
    let younger: u64 = m.sizes[..i].iter().sum();
    if younger != m.younger_total || m.sizes[i] != m.oldest_size {
        return Err(format!("{}: record totals disagree with sizes {:?}", m.bucket, m.sizes));
    }
    if !tiered(younger, m.sizes[i]) {
        return Err(format!("{}: merged {younger} over oldest {} without meeting the ratio", m.bucket, m.sizes[i]));
    }
    if let Some(j) = (i + 1..m.sizes.len()).find(|&j| tiered(m.sizes[..j].iter().sum(), m.sizes[j])) {
        return Err(format!("{}: chose index {i} while the longer sequence ending at {j} qualified", m.bucket));
    }
    Ok(())
}

/// No suffix of a quiesced component list qualifies.
pub fn check_quiesced(sizes: &[u64]) -> Result<(), String> {
    match (1..sizes.len()).find(|&j| tiered(sizes[..j].iter().sum(), sizes[j])) {
        Some(j) => Err(format!("sizes {sizes:?} leave a qualifying sequence ending at {j}")),
        None => Ok(()),
    }
}

pub fn criterion_8() -> Outcome {
    let mut problems = Vec::new();
    let mut merges = 0;
    let mut lists = 0;
    for seed in 0..3 {
        let mut cfg = concurrency_config(seed);
        cfg.workload.records = 8192;
        cfg.sim.partition.memory_budget_bytes = 8 * 1024;
        cfg.sim.partition.lsm.split_threshold_bytes = 256 * 1024;
        let mut s = Scenario::from_config(&cfg).expect("valid config");
        s.ingest();
        let r = s.rebalance(cfg.sim.partitions_of(cfg.sim.initial_nodes + 1), cfg.max_rebalance_ticks);
        s.drain(cfg.max_rebalance_ticks);
        if r.outcome != "committed" {
            problems.push(format!("seed {seed}: outcome {}", r.outcome));
        }
        if let Err(e) = s.flush_and_quiesce() {
            problems.push(format!("seed {seed}: {e}"));
        }
        for n in s.sim().node_ids() {
            let Some(node) = s.sim().node(n) else { continue };
            for p in node.partitions() {
                let log = p.primary().merge_log().into_iter().chain(p.secondary().merge_log().iter().cloned());
                for m in log {
                    merges += 1;
                    if let Err(e) = check_merge(&m) {
                        problems.push(format!("seed {seed} {}: {e}", p.id()));
                    }
                }
                for id in p.bucket_ids() {
                    lists += 1;
                    let sizes: Vec<u64> =
                        p.primary().bucket(id).unwrap().components().iter().map(|c| c.estimated_size()).collect();
                    if let Err(e) = check_quiesced(&sizes) {
                        problems.push(format!("seed {seed} {} {id}: {e}", p.id()));
                    }
                }
                lists += 1;
                let sizes: Vec<u64> = p.secondary().components().iter().map(|c| c.data.size()).collect();
                if let Err(e) = check_quiesced(&sizes) {
                    problems.push(format!("seed {seed} {} secondary: {e}", p.id()));
                }
            }
        }
    }
    if merges == 0 {
        problems.push("no merges ran".into());
    }
    Outcome::new(problems, format!("{merges} merges checked, {lists} quiesced component lists"))
}
