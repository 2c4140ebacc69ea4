use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use rand::distributions::Alphanumeric;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::node::{Record, WriteOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyDistribution {
    /// `k000000000000`, `k000000000001`, ...
    Sequential,
    /// Random 64-bit keys.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub records: u64,
    pub keys: KeyDistribution,
    pub payload_bytes: usize,
    pub secondary_cardinality: u32,
    /// Client operations submitted per tick while loading.
    pub ingest_batch: usize,
    /// Concurrent writes during a rebalance, as a fraction of the ingest rate.
    pub write_rate: f64,
    /// Point reads issued per concurrent write.
    pub read_ratio: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            records: 1 << 16,
            keys: KeyDistribution::Uniform,
            payload_bytes: 64,
            secondary_cardinality: 1024,
            ingest_batch: 256,
            write_rate: 0.1,
            read_ratio: 0.5,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn key(&self, i: u64, rng: &mut ChaCha8Rng) -> Bytes {
        match self.keys {
            KeyDistribution::Sequential => Bytes::from(format!("k{i:012}")),
            KeyDistribution::Uniform => Bytes::from(format!("u{:016x}", rng.gen::<u64>())),
        }
    }

    pub fn secondary(&self, rng: &mut ChaCha8Rng) -> Bytes {
        Bytes::from(format!("s{:06}", rng.gen_range(0..self.secondary_cardinality.max(1))))
    }

    pub fn secondary_value(&self, i: u32) -> Bytes {
        Bytes::from(format!("s{i:06}"))
    }

    pub fn payload(&self, rng: &mut ChaCha8Rng) -> Bytes {
        let s: Vec<u8> = (0..self.payload_bytes).map(|_| rng.sample(Alphanumeric)).collect();
        Bytes::from(s)
    }

    pub fn put(&self, key: Bytes, rng: &mut ChaCha8Rng) -> WriteOp {
        WriteOp::Put { key, payload: self.payload(rng), secondary: Some(self.secondary(rng)) }
    }
}

/// The reference map: every acknowledged write is applied here, and every
/// read is checked against it.
#[derive(Clone, Debug, Default)]
pub struct Shadow {
    live: BTreeMap<Bytes, Record>,
    deleted: BTreeSet<Bytes>,
}

impl Shadow {
    pub fn apply(&mut self, op: &WriteOp) {
        match op {
            WriteOp::Put { key, payload, secondary } => {
                self.deleted.remove(key);
                self.live.insert(
                    key.clone(),
                    Record { key: key.clone(), payload: payload.clone(), secondary: secondary.clone() },
                );
            }
            WriteOp::Delete { key } => {
                if self.live.remove(key).is_some() {
                    self.deleted.insert(key.clone());
                }
            }
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&Record> {
        self.live.get(key)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.live.values()
    }

    /// Keys that were deleted and not written again.
    pub fn deleted(&self) -> impl Iterator<Item = &Bytes> {
        self.deleted.iter()
    }

    /// Live records whose key lies in `[lo, hi]`, in key order.
    pub fn range(&self, lo: &[u8], hi: &[u8]) -> Vec<&Record> {
        if lo > hi {
            return Vec::new();
        }
        self.live
            .range::<[u8], _>((std::ops::Bound::Included(lo), std::ops::Bound::Included(hi)))
            .map(|(_, r)| r)
            .collect()
    }

    /// Keys of live records whose secondary key lies in `[lo, hi]`.
    pub fn secondary_range(&self, lo: &[u8], hi: &[u8]) -> BTreeSet<Bytes> {
        self.live
            .values()
            .filter(|r| r.secondary.as_deref().is_some_and(|s| s >= lo && s <= hi))
            .map(|r| r.key.clone())
            .collect()
    }
}
