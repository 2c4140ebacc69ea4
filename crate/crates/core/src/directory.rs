//! Extendible-hashing key routing.
//!
//! A [`BucketId`] names the set of keys whose hash ends in `depth` specific
//! low-order bits. The [`GlobalDirectory`] maps every `global_depth`-bit
//! suffix to the partition that owns the covering bucket. Directories are
//! immutable values; a new version is produced by [`refresh_global`] or by
//! expanding an [`Assignment`] computed with [`balance`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};

/// Largest supported bucket depth. Slot arithmetic is done in `u64`.
pub const MAX_DEPTH: u32 = 48;

/// Hash used for all placement decisions. Seedless so that routing survives
/// restarts and is identical on every node.
pub fn hash_key(key: &[u8]) -> u64 {
    XxHash64::oneshot(0, key)
}

fn mask(depth: u32) -> u64 {
    if depth == 0 {
        0
    } else {
        (1u64 << depth) - 1
    }
}

/// An extendible-hashing bucket: the keys whose hash has `bits` as its
/// `depth` low-order bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BucketId {
    bits: u64,
    depth: u32,
}

impl BucketId {
    pub fn new(bits: u64, depth: u32) -> Result<Self> {
        if depth > MAX_DEPTH || bits > mask(depth) {
            return Err(Error::InvalidBucket { bits, depth });
        }
        Ok(Self { bits, depth })
    }

    /// The bucket of depth `depth` containing `hash`.
    pub fn of_hash(hash: u64, depth: u32) -> Self {
        debug_assert!(depth <= MAX_DEPTH);
        Self { bits: hash & mask(depth), depth }
    }

    /// The single depth-0 bucket covering the whole hash space.
    pub const fn root() -> Self {
        Self { bits: 0, depth: 0 }
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn contains_hash(&self, hash: u64) -> bool {
        hash & mask(self.depth) == self.bits
    }

    pub fn contains_key(&self, key: &[u8]) -> bool {
        self.contains_hash(hash_key(key))
    }

    /// Children obtained by taking one more hash bit: the first keeps a 0 in
    /// the new bit position, the second a 1.
    pub fn split(&self) -> (BucketId, BucketId) {
        let depth = self.depth + 1;
        (
            BucketId { bits: self.bits, depth },
            BucketId { bits: self.bits | (1u64 << self.depth), depth },
        )
    }

    pub fn parent(&self) -> Option<BucketId> {
        if self.depth == 0 {
            None
        } else {
            let depth = self.depth - 1;
            Some(BucketId { bits: self.bits & mask(depth), depth })
        }
    }

    /// True when the two buckets share at least one hash value, i.e. one is
    /// an ancestor of (or equal to) the other.
    pub fn overlaps(&self, other: &BucketId) -> bool {
        let d = self.depth.min(other.depth);
        self.bits & mask(d) == other.bits & mask(d)
    }

    /// Directory slots at global depth `global_depth` covered by this bucket.
    pub fn slots(&self, global_depth: u32) -> impl Iterator<Item = u64> {
        let step = 1u64 << self.depth;
        let count = if global_depth >= self.depth {
            1u64 << (global_depth - self.depth)
        } else {
            0
        };
        let bits = self.bits;
        (0..count).map(move |i| bits + i * step)
    }
}

impl fmt::Debug for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.depth == 0 {
            write!(f, "*")
        } else {
            write!(f, "{:0width$b}", self.bits, width = self.depth as usize)
        }
    }
}

pub type NodeId = u32;

/// A partition hosted by a node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartitionId {
    pub node: NodeId,
    pub slot: u32,
}

impl PartitionId {
    pub const fn new(node: NodeId, slot: u32) -> Self {
        Self { node, slot }
    }
}

impl fmt::Debug for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}.{}", self.node, self.slot)
    }
}

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// `2^(global_depth - depth)`: the share of the directory a bucket covers.
pub fn normalized_size(depth: u32, global_depth: u32) -> Result<u64> {
    if depth > global_depth {
        return Err(Error::DepthExceedsGlobal { depth, global_depth });
    }
    Ok(1u64 << (global_depth - depth))
}

/// Cluster-wide map from hash suffixes to partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalDirectory {
    version: u64,
    global_depth: u32,
    entries: Vec<PartitionId>,
}

impl GlobalDirectory {
    pub fn new(version: u64, global_depth: u32, entries: Vec<PartitionId>) -> Result<Self> {
        if global_depth > MAX_DEPTH || entries.len() as u64 != 1u64 << global_depth {
            return Err(Error::CorruptDirectory(format!(
                "depth {global_depth} needs {} entries, got {}",
                1u64 << global_depth.min(MAX_DEPTH),
                entries.len()
            )));
        }
        Ok(Self { version, global_depth, entries })
    }

    /// A directory of depth `global_depth` whose slot `s` is owned by
    /// `partitions[s % partitions.len()]`.
    pub fn round_robin(version: u64, global_depth: u32, partitions: &[PartitionId]) -> Result<Self> {
        if partitions.is_empty() {
            return Err(Error::NoPartitions);
        }
        let entries = (0..1usize << global_depth)
            .map(|s| partitions[s % partitions.len()])
            .collect();
        Self::new(version, global_depth, entries)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn global_depth(&self) -> u32 {
        self.global_depth
    }

    pub fn entries(&self) -> &[PartitionId] {
        &self.entries
    }

    pub fn route_hash(&self, hash: u64) -> PartitionId {
        self.entries[(hash & mask(self.global_depth)) as usize]
    }

    pub fn route(&self, key: &[u8]) -> PartitionId {
        self.route_hash(hash_key(key))
    }

    /// Distinct partitions referenced by the directory, sorted.
    pub fn partitions(&self) -> Vec<PartitionId> {
        let mut v = self.entries.clone();
        v.sort();
        v.dedup();
        v
    }

    /// The partition owning every slot of `bucket`, or `None` if its slots
    /// are split across partitions. A bucket deeper than the directory
    /// resolves to the single slot that contains it.
    pub fn owner_of(&self, bucket: BucketId) -> Option<PartitionId> {
        if bucket.depth() > self.global_depth {
            return Some(self.entries[(bucket.bits() & mask(self.global_depth)) as usize]);
        }
        let mut slots = bucket.slots(self.global_depth);
        let first = self.entries[slots.next()? as usize];
        slots.all(|s| self.entries[s as usize] == first).then_some(first)
    }

    /// Per-partition normalized load (number of slots owned).
    pub fn loads(&self) -> BTreeMap<PartitionId, u64> {
        let mut loads = BTreeMap::new();
        for p in &self.entries {
            *loads.entry(*p).or_insert(0) += 1;
        }
        loads
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("directory serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let dir: GlobalDirectory = serde_json::from_slice(bytes)
            .map_err(|e| Error::CorruptDirectory(e.to_string()))?;
        Self::new(dir.version, dir.global_depth, dir.entries)
    }
}

/// Rebuilds the global directory from the bucket sets reported by every
/// partition. The global depth becomes the largest bucket depth.
pub fn refresh_global(
    locals: &[(PartitionId, Vec<BucketId>)],
    previous_version: u64,
) -> Result<GlobalDirectory> {
    let global_depth = locals
        .iter()
        .flat_map(|(_, bs)| bs.iter().map(|b| b.depth()))
        .max()
        .ok_or_else(|| Error::CorruptDirectory("no buckets reported".into()))?;
    let mut slots: Vec<Option<PartitionId>> = vec![None; 1usize << global_depth];
    for (partition, buckets) in locals {
        for bucket in buckets {
            for s in bucket.slots(global_depth) {
                let slot = &mut slots[s as usize];
                if let Some(other) = slot {
                    return Err(Error::CorruptDirectory(format!(
                        "slot {s:0w$b} claimed by {other} and {partition} ({bucket})",
                        w = global_depth as usize
                    )));
                }
                *slot = Some(*partition);
            }
        }
    }
    let entries = slots
        .into_iter()
        .enumerate()
        .map(|(s, p)| {
            p.ok_or_else(|| {
                Error::CorruptDirectory(format!(
                    "slot {s:0w$b} not covered by any bucket",
                    w = global_depth as usize
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GlobalDirectory::new(previous_version + 1, global_depth, entries)
}

/// One reassignment performed by [`balance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceStep {
    /// An unassigned bucket was placed on the least loaded partition.
    Place { bucket: BucketId, to: PartitionId },
    /// The smallest bucket of the most loaded partition moved to the least
    /// loaded one.
    Move { bucket: BucketId, from: PartitionId, to: PartitionId },
}

/// Result of [`balance`]: bucket placement plus derived loads and the trace
/// of steps that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub global_depth: u32,
    pub buckets: BTreeMap<BucketId, PartitionId>,
    pub trace: Vec<BalanceStep>,
}

impl Assignment {
    /// Normalized load of every target partition, including empty ones.
    pub fn partition_loads(&self, partitions: &[PartitionId]) -> BTreeMap<PartitionId, u64> {
        let mut loads: BTreeMap<PartitionId, u64> = partitions.iter().map(|p| (*p, 0)).collect();
        for (b, p) in &self.buckets {
            *loads.entry(*p).or_insert(0) += 1u64 << (self.global_depth - b.depth());
        }
        loads
    }

    /// Expands the assignment into a full directory.
    pub fn to_directory(&self, version: u64) -> Result<GlobalDirectory> {
        let locals: Vec<(PartitionId, Vec<BucketId>)> = {
            let mut by_p: BTreeMap<PartitionId, Vec<BucketId>> = BTreeMap::new();
            for (b, p) in &self.buckets {
                by_p.entry(*p).or_default().push(*b);
            }
            by_p.into_iter().collect()
        };
        let mut dir = refresh_global(&locals, version.saturating_sub(1))?;
        if dir.global_depth < self.global_depth {
            // keep the requested depth even if every bucket is shallower
            let width = 1usize << dir.global_depth;
            let entries = (0..1usize << self.global_depth)
                .map(|s| dir.entries[s % width])
                .collect();
            dir = GlobalDirectory::new(version, self.global_depth, entries)?;
        }
        dir.version = version;
        Ok(dir)
    }
}

struct Loads {
    global_depth: u32,
    partition: BTreeMap<PartitionId, u64>,
    node: BTreeMap<NodeId, u64>,
    members: BTreeMap<PartitionId, Vec<BucketId>>,
}

impl Loads {
    fn size(&self, b: &BucketId) -> u64 {
        1u64 << (self.global_depth - b.depth())
    }

    fn key(&self, p: &PartitionId) -> (u64, u64) {
        (self.partition[p], self.node[&p.node])
    }

    fn assign(&mut self, b: BucketId, p: PartitionId) {
        let s = self.size(&b);
        *self.partition.get_mut(&p).unwrap() += s;
        *self.node.get_mut(&p.node).unwrap() += s;
        self.members.get_mut(&p).unwrap().push(b);
    }

    fn unassign(&mut self, b: BucketId, p: PartitionId) {
        let s = self.size(&b);
        *self.partition.get_mut(&p).unwrap() -= s;
        *self.node.get_mut(&p.node).unwrap() -= s;
        self.members.get_mut(&p).unwrap().retain(|x| *x != b);
    }

    /// Least loaded by (partition load, node load); lowest id breaks ties.
    fn least(&self) -> PartitionId {
        *self
            .partition
            .keys()
            .min_by(|a, b| self.key(a).cmp(&self.key(b)).then(a.cmp(b)))
            .unwrap()
    }

    /// Most loaded by (partition load, node load); lowest id breaks ties.
    fn most(&self) -> PartitionId {
        *self
            .partition
            .keys()
            .min_by(|a, b| self.key(b).cmp(&self.key(a)).then(a.cmp(b)))
            .unwrap()
    }

    /// Smallest normalized size (deepest), lowest (bits, depth) on ties.
    fn smallest_in(&self, p: &PartitionId) -> Option<BucketId> {
        self.members[p]
            .iter()
            .min_by(|a, b| match self.size(a).cmp(&self.size(b)) {
                Ordering::Equal => a.cmp(b),
                o => o,
            })
            .copied()
    }
}

/// Greedy bucket placement.
///
/// Buckets owned by a partition outside `partitions` (or by nobody) are
/// placed first, largest first, each on the currently least loaded
/// partition. Then the smallest bucket of the most loaded partition is moved
/// to the least loaded partition for as long as doing so narrows the gap
/// between the two.
pub fn balance(
    buckets: &BTreeMap<BucketId, Option<PartitionId>>,
    partitions: &[PartitionId],
    global_depth: u32,
) -> Result<Assignment> {
    if partitions.is_empty() {
        return Err(Error::NoPartitions);
    }
    for b in buckets.keys() {
        if b.depth() > global_depth {
            return Err(Error::DepthExceedsGlobal { depth: b.depth(), global_depth });
        }
    }
    let mut loads = Loads {
        global_depth,
        partition: partitions.iter().map(|p| (*p, 0)).collect(),
        node: partitions.iter().map(|p| (p.node, 0)).collect(),
        members: partitions.iter().map(|p| (*p, Vec::new())).collect(),
    };
    let mut unassigned = Vec::new();
    for (b, owner) in buckets {
        match owner {
            Some(p) if loads.partition.contains_key(p) => loads.assign(*b, *p),
            _ => unassigned.push(*b),
        }
    }
    unassigned.sort_by(|a, b| loads.size(b).cmp(&loads.size(a)).then(a.cmp(b)));

    let mut trace = Vec::new();
    for b in unassigned {
        let to = loads.least();
        loads.assign(b, to);
        trace.push(BalanceStep::Place { bucket: b, to });
    }

    loop {
        let p_max = loads.most();
        let Some(b) = loads.smallest_in(&p_max) else { break };
        let p_min = loads.least();
        let (max, min, size) = (
            loads.partition[&p_max] as i128,
            loads.partition[&p_min] as i128,
            loads.size(&b) as i128,
        );
        if ((max - size) - (min + size)).abs() < max - min {
            loads.unassign(b, p_max);
            loads.assign(b, p_min);
            trace.push(BalanceStep::Move { bucket: b, from: p_max, to: p_min });
        } else {
            break;
        }
    }

    let buckets = loads
        .members
        .iter()
        .flat_map(|(p, bs)| bs.iter().map(move |b| (*b, *p)))
        .collect();
    Ok(Assignment { global_depth, buckets, trace })
}

/// Serde adapter for maps keyed by bucket, stored as a list of pairs so that
/// formats with string-only map keys (JSON) can hold them.
pub mod bucket_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::BucketId;

    pub fn serialize<V: Serialize, S: Serializer>(map: &BTreeMap<BucketId, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<BucketId, V>, D::Error> {
        Ok(Vec::<(BucketId, V)>::deserialize(d)?.into_iter().collect())
    }
}
