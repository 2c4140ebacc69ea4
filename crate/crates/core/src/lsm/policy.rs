//! Size-tiered merge selection.

use serde::{Deserialize, Serialize};

use crate::directory::BucketId;

pub const DEFAULT_MERGE_RATIO: f64 = 1.2;

/// Chooses the merge sequence for a component list given newest first.
///
/// A sequence is an oldest component `C` together with every component
/// younger than it; it qualifies when the younger components total at least
/// `ratio` times the size of `C`. Candidates are tried from the oldest
/// component outward, so the longest qualifying sequence wins. Returns the
/// index of `C`.
pub fn pick_merge(sizes_newest_first: &[u64], ratio: f64) -> Option<usize> {
    let mut younger: Vec<u64> = Vec::with_capacity(sizes_newest_first.len());
    let mut acc = 0u64;
    for s in sizes_newest_first {
        younger.push(acc);
        acc += s;
    }
    (1..sizes_newest_first.len())
        .rev()
        .find(|&j| qualifies(younger[j], sizes_newest_first[j], ratio))
}

pub fn qualifies(younger_total: u64, oldest: u64, ratio: f64) -> bool {
    younger_total as f64 >= ratio * oldest as f64
}

/// One executed merge, kept for policy conformance checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub bucket: BucketId,
    /// Component sizes at decision time, newest first.
    pub sizes: Vec<u64>,
    /// Index of the oldest merged component.
    pub oldest_index: usize,
    pub younger_total: u64,
    pub oldest_size: u64,
    pub output_entries: usize,
    pub tombstones_dropped: usize,
}
