//! Compares the cluster's stored data with the shadow map.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::workload::{Shadow, WorkloadSpec};
use crate::directory::{BucketId, PartitionId};
use crate::node::{Partition, Record};
use crate::sim::Sim;

const MAX_PROBLEMS: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub records_expected: usize,
    pub records_scanned: usize,
    pub keys_checked: usize,
    pub secondary_probes: usize,
    pub problems: Vec<String>,
    /// Problems beyond the first few are only counted.
    pub suppressed: usize,
    /// Recent trace lines, when tracing was on.
    pub repro: Vec<String>,
}

impl VerifyReport {
    fn problem(&mut self, msg: String) {
        if self.problems.len() < MAX_PROBLEMS {
            self.problems.push(msg);
        } else {
            self.suppressed += 1;
        }
    }
}

/// Checks a quiescent cluster: cluster health, bucket ownership against
/// the coordinator's directory, a full ordered scan, per-key lookups and
/// secondary range probes.
pub fn verify(sim: &Sim, shadow: &Shadow, spec: &WorkloadSpec, probes: usize, seed: u64) -> VerifyReport {
    let mut r = VerifyReport { records_expected: shadow.len(), ..Default::default() };
    for e in sim.fatal_errors() {
        r.problem(e.clone());
    }
    let Some(cc) = sim.coordinator() else {
        r.problem("coordinator is down".into());
        return finish(sim, r);
    };
    if let Some(p) = cc.phase() {
        r.problem(format!("coordinator still {}", p.name()));
    }
    let directory = cc.directory().clone();
    if sim.router().directory() != &directory {
        r.problem(format!(
            "router uses directory v{}, coordinator v{}",
            sim.router().directory().version(),
            directory.version()
        ));
    }

    let mut partitions: BTreeMap<PartitionId, &Partition> = BTreeMap::new();
    for n in sim.node_ids() {
        match sim.node(n) {
            Some(node) => {
                for p in node.partitions() {
                    partitions.insert(p.id(), p);
                }
            }
            None => r.problem(format!("node {n} is down")),
        }
    }

    // Ownership: every local bucket belongs to its partition in the global
    // directory, and no two buckets overlap.
    let mut all: Vec<(BucketId, PartitionId)> = Vec::new();
    for (pid, p) in &partitions {
        if let Some(s) = p.staged() {
            r.problem(format!("{pid} still holds staged buckets of rebalance {}", s.rebalance()));
        }
        for b in p.bucket_ids() {
            match directory.owner_of(b) {
                Some(o) if o == *pid => {}
                o => r.problem(format!("{pid} holds bucket {b} owned by {o:?}")),
            }
            all.push((b, *pid));
        }
    }
    for (i, (a, pa)) in all.iter().enumerate() {
        for (b, pb) in &all[i + 1..] {
            if a.overlaps(b) {
                r.problem(format!("bucket {a} on {pa} overlaps {b} on {pb}"));
            }
        }
    }
    // Together the buckets must cover every directory slot.
    let depth = all.iter().map(|(b, _)| b.depth()).max().unwrap_or(0).max(directory.global_depth());
    let covered: u128 = all.iter().map(|(b, _)| 1u128 << (depth - b.depth())).sum();
    if covered != 1u128 << depth {
        r.problem(format!("local buckets cover {covered} of {} hash slots", 1u128 << depth));
    }

    // Full ordered scan of every partition against the shadow map.
    let mut seen: BTreeMap<Bytes, PartitionId> = BTreeMap::new();
    for (pid, p) in &partitions {
        let records = match p.all_records() {
            Ok(v) => v,
            Err(e) => {
                r.problem(format!("scan of {pid} failed: {e}"));
                continue;
            }
        };
        if records.windows(2).any(|w| w[0].key >= w[1].key) {
            r.problem(format!("ordered scan of {pid} is not strictly increasing"));
        }
        for rec in records {
            r.records_scanned += 1;
            if let Some(other) = seen.insert(rec.key.clone(), *pid) {
                r.problem(format!("key {:?} stored on both {other} and {pid}", rec.key));
            }
            if directory.route(&rec.key) != *pid {
                r.problem(format!("key {:?} stored on {pid}, routed to {}", rec.key, directory.route(&rec.key)));
            }
            match shadow.get(&rec.key) {
                Some(want) if *want == rec => {}
                Some(want) => r.problem(format!("key {:?} on {pid}: stored {:?}, expected {:?}", rec.key, short(&rec), short(want))),
                None => r.problem(format!("key {:?} on {pid} is not in the shadow map", rec.key)),
            }
        }
    }
    for rec in shadow.records() {
        if !seen.contains_key(&rec.key) {
            r.problem(format!("key {:?} is missing (expected on {})", rec.key, directory.route(&rec.key)));
        }
    }

    // Point lookups through the directory, including deleted keys.
    for rec in shadow.records() {
        r.keys_checked += 1;
        let pid = directory.route(&rec.key);
        match partitions.get(&pid).map(|p| p.point_lookup(&rec.key)) {
            Some(Ok(Some(got))) if got == *rec => {}
            Some(Ok(got)) => r.problem(format!("lookup of {:?} on {pid} returned {:?}", rec.key, got.as_ref().map(short))),
            Some(Err(e)) => r.problem(format!("lookup of {:?} on {pid} failed: {e}", rec.key)),
            None => r.problem(format!("lookup of {:?}: partition {pid} is unavailable", rec.key)),
        }
    }
    for key in shadow.deleted() {
        r.keys_checked += 1;
        let pid = directory.route(key);
        if let Some(Ok(Some(_))) = partitions.get(&pid).map(|p| p.point_lookup(key)) {
            r.problem(format!("deleted key {key:?} is visible on {pid}"));
        }
    }

    // Secondary range probes over all partitions.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ec0_17da);
    let card = spec.secondary_cardinality.max(1);
    for _ in 0..probes {
        let a = rng.gen_range(0..card);
        let b = (a + rng.gen_range(0..card.min(8))).min(card - 1);
        let (lo, hi) = (spec.secondary_value(a), spec.secondary_value(b));
        let want = shadow.secondary_range(&lo, &hi);
        let mut got = BTreeSet::new();
        for (pid, p) in &partitions {
            match p.secondary_query(&lo, &hi) {
                Ok(recs) => {
                    for rec in recs {
                        if !got.insert(rec.key.clone()) {
                            r.problem(format!("secondary probe {lo:?}..{hi:?} returned {:?} twice", rec.key));
                        }
                    }
                }
                Err(e) => r.problem(format!("secondary probe on {pid} failed: {e}")),
            }
        }
        r.secondary_probes += 1;
        if got != want {
            let extra: Vec<_> = got.difference(&want).take(3).collect();
            let missing: Vec<_> = want.difference(&got).take(3).collect();
            r.problem(format!("secondary probe {lo:?}..{hi:?}: extra {extra:?}, missing {missing:?}"));
        }
    }
    finish(sim, r)
}

fn finish(sim: &Sim, mut r: VerifyReport) -> VerifyReport {
    r.passed = r.problems.is_empty();
    if !r.passed {
        let trace = sim.trace();
        r.repro = trace[trace.len().saturating_sub(20)..]
            .iter()
            .map(|t| format!("#{} t={} {} {} [{}]", t.index, t.time, t.actor, t.event, t.digest))
            .collect();
        if r.repro.is_empty() {
            r.repro.push(format!(
                "rerun with the same seed and tracing on; {} events, digest {:016x}, {} crashes",
                sim.events_processed(),
                sim.trace_digest(),
                sim.counters().crashes
            ));
        }
    }
    r
}

fn short(r: &Record) -> String {
    let p = String::from_utf8_lossy(&r.payload);
    let p: String = p.chars().take(12).collect();
    format!("{p}.. sec {:?}", r.secondary)
}
