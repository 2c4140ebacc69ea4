//! The partition's secondary index: one conventional LSM-tree keyed by
//! `(secondary key, primary key)`.
//!
//! Entries are never deleted in place. Updates simply add a new composite
//! key and queries validate every hit against the primary index. Buckets
//! that move away are recorded in each component's lazy-delete set; their
//! entries are hidden from queries and dropped by the next merge.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::{BufMut, Bytes};
use serde::{Deserialize, Serialize};

use crate::directory::{hash_key, BucketId};
use crate::error::{Error, Result};
use crate::lsm::component::component_file_name;
use crate::lsm::iter::{Cursor, ReconcileIter};
use crate::lsm::policy::{pick_merge, MergeRecord};
use crate::lsm::{DiskComponent, Entry, MemTable};
use crate::storage::Env;

const SEP: u8 = 0x00;
const ESCAPED_ZERO: u8 = 0xff;
const TERMINATOR: u8 = 0x01;
const PAST_END: u8 = 0x02;

fn escape_into(out: &mut Vec<u8>, sec: &[u8]) {
    for &b in sec {
        out.put_u8(b);
        if b == SEP {
            out.put_u8(ESCAPED_ZERO);
        }
    }
}

/// Order-preserving encoding of `(sec, pk)`: composite keys sort first by
/// secondary key, then by primary key.
pub fn composite_key(sec: &[u8], pk: &[u8]) -> Bytes {
    let mut out = Vec::with_capacity(sec.len() + pk.len() + 4);
    escape_into(&mut out, sec);
    out.extend_from_slice(&[SEP, TERMINATOR]);
    out.extend_from_slice(pk);
    out.into()
}

/// Smallest composite key of secondary key `sec`.
pub fn lower_bound(sec: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(sec.len() + 2);
    escape_into(&mut out, sec);
    out.extend_from_slice(&[SEP, TERMINATOR]);
    out
}

/// A key that sorts after every composite key of `sec` and before every
/// composite key of any larger secondary key. It is never itself a valid
/// composite key, so it can serve as an inclusive bound.
pub fn upper_bound(sec: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(sec.len() + 2);
    escape_into(&mut out, sec);
    out.extend_from_slice(&[SEP, PAST_END]);
    out
}

pub fn split_composite(key: &[u8]) -> Option<(Bytes, Bytes)> {
    let mut sec = Vec::new();
    let mut i = 0;
    while i < key.len() {
        if key[i] == SEP {
            match key.get(i + 1) {
                Some(&ESCAPED_ZERO) => sec.push(SEP),
                Some(&TERMINATOR) => return Some((sec.into(), Bytes::copy_from_slice(&key[i + 2..]))),
                _ => return None,
            }
            i += 2;
        } else {
            sec.push(key[i]);
            i += 1;
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct SecondaryComponent {
    pub data: Arc<DiskComponent>,
    /// Buckets whose entries in this component are logically deleted.
    pub deleted: BTreeSet<BucketId>,
}

impl SecondaryComponent {
    fn hides(&self, e: &Entry) -> bool {
        if self.deleted.is_empty() {
            return false;
        }
        let Some((_, pk)) = split_composite(&e.key) else { return true };
        let h = hash_key(&pk);
        self.deleted.iter().any(|b| b.contains_hash(h))
    }

    fn live_range(&self, lo: &[u8], hi: &[u8]) -> Vec<Entry> {
        let start = self.data.lower_bound(lo);
        self.data.entries()[start..]
            .iter()
            .take_while(|e| e.key.as_ref() <= hi)
            .filter(|e| !self.hides(e))
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ComponentMeta {
    file: String,
    deleted: Vec<BucketId>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct SecondaryMeta {
    next_uid: u64,
    flushed_lsn: u64,
    components: Vec<ComponentMeta>,
}

#[derive(Debug)]
pub struct SecondaryIndex {
    env: Env,
    prefix: String,
    bits_per_key: usize,
    merge_ratio: f64,
    memory: MemTable,
    components: Vec<SecondaryComponent>,
    flushed_lsn: u64,
    next_uid: u64,
    merges: Vec<MergeRecord>,
}

impl SecondaryIndex {
    fn meta_file(prefix: &str) -> String {
        format!("{prefix}.meta")
    }

    pub fn create(env: Env, prefix: &str, bits_per_key: usize, merge_ratio: f64) -> Result<Self> {
        let idx = Self {
            env,
            prefix: prefix.to_string(),
            bits_per_key,
            merge_ratio,
            memory: MemTable::new(),
            components: Vec::new(),
            flushed_lsn: 0,
            next_uid: 0,
            merges: Vec::new(),
        };
        idx.force(&idx.components, idx.flushed_lsn)?;
        Ok(idx)
    }

    pub fn open(env: Env, prefix: &str, bits_per_key: usize, merge_ratio: f64) -> Result<Self> {
        let file = Self::meta_file(prefix);
        let raw = env.storage.get(&file)?.ok_or_else(|| Error::Corrupt {
            file: file.clone(),
            reason: "missing secondary metadata".into(),
        })?;
        let meta: SecondaryMeta =
            serde_json::from_slice(&raw).map_err(|e| Error::Corrupt { file: file.clone(), reason: e.to_string() })?;
        let mut components = Vec::with_capacity(meta.components.len());
        for c in &meta.components {
            components.push(SecondaryComponent {
                data: DiskComponent::open(&env, &c.file)?,
                deleted: c.deleted.iter().copied().collect(),
            });
        }
        let keep: BTreeSet<&str> = meta.components.iter().map(|c| c.file.as_str()).collect();
        for f in env.storage.list(&format!("{prefix}/c-"))? {
            if !keep.contains(f.as_str()) {
                env.storage.delete(&f)?;
            }
        }
        Ok(Self {
            env,
            prefix: prefix.to_string(),
            bits_per_key,
            merge_ratio,
            memory: MemTable::new(),
            components,
            flushed_lsn: meta.flushed_lsn,
            next_uid: meta.next_uid,
            merges: Vec::new(),
        })
    }

    fn force(&self, components: &[SecondaryComponent], flushed_lsn: u64) -> Result<()> {
        let meta = SecondaryMeta {
            next_uid: self.next_uid,
            flushed_lsn,
            components: components
                .iter()
                .map(|c| ComponentMeta { file: c.data.file().to_string(), deleted: c.deleted.iter().copied().collect() })
                .collect(),
        };
        self.env.point("secondary.before-force")?;
        self.env
            .storage
            .put(&Self::meta_file(&self.prefix), &serde_json::to_vec(&meta).expect("metadata serializes"))
    }

    fn new_file(&mut self, entries: &[Entry]) -> String {
        let uid = self.next_uid;
        self.next_uid += 1;
        let min = entries.iter().map(|e| e.seq).min().unwrap_or(0);
        let max = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        component_file_name(&self.prefix, BucketId::root(), min, max, uid)
    }

    pub fn flushed_lsn(&self) -> u64 {
        self.flushed_lsn
    }

    pub fn memory_bytes(&self) -> usize {
        self.memory.bytes()
    }

    pub fn components(&self) -> &[SecondaryComponent] {
        &self.components
    }

    pub fn merge_log(&self) -> &[MergeRecord] {
        &self.merges
    }

    pub fn insert(&mut self, sec: &[u8], pk: &[u8], lsn: u64) {
        self.memory.insert(Entry::put(composite_key(sec, pk), Bytes::new(), lsn));
    }

    /// Writes the memory component out as the newest disk component.
    pub fn flush(&mut self) -> Result<()> {
        if self.memory.is_empty() {
            return Ok(());
        }
        let entries: Vec<Entry> = self.memory.iter().cloned().collect();
        let max = self.memory.max_seq();
        let file = self.new_file(&entries);
        let written = DiskComponent::write(&self.env, file, BucketId::root(), entries, self.bits_per_key)
            .map_err(|e| Error::FlushFailed { bucket: BucketId::root(), reason: e.to_string() })?;
        let mut next = Vec::with_capacity(self.components.len() + 1);
        next.push(SecondaryComponent { data: written.clone(), deleted: BTreeSet::new() });
        next.extend(self.components.iter().cloned());
        let flushed = self.flushed_lsn.max(max);
        if let Err(e) = self.force(&next, flushed) {
            written.mark_obsolete();
            return Err(e);
        }
        self.components = next;
        self.flushed_lsn = flushed;
        self.memory = MemTable::new();
        Ok(())
    }

    /// Registers components built elsewhere (a received bucket's entries).
    /// Components already present are skipped.
    pub fn install(&mut self, incoming: &[Arc<DiskComponent>]) -> Result<usize> {
        let fresh: Vec<_> = incoming
            .iter()
            .filter(|c| !self.components.iter().any(|have| have.data.file() == c.file()))
            .collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        let mut next: Vec<_> = fresh
            .iter()
            .map(|c| SecondaryComponent { data: (*c).clone(), deleted: BTreeSet::new() })
            .collect();
        next.extend(self.components.iter().cloned());
        self.force(&next, self.flushed_lsn)?;
        self.components = next;
        Ok(fresh.len())
    }

    /// Records `bucket` in the lazy-delete set of every component. The
    /// memory component is flushed first so the mark covers everything
    /// written so far and nothing written later.
    pub fn mark_deleted(&mut self, bucket: BucketId) -> Result<()> {
        self.flush()?;
        if self.components.iter().all(|c| c.deleted.contains(&bucket)) {
            return Ok(());
        }
        let mut next = self.components.clone();
        for c in &mut next {
            c.deleted.insert(bucket);
        }
        self.force(&next, self.flushed_lsn)?;
        self.components = next;
        Ok(())
    }

    /// Composite-key hits for secondary keys in `[lo, hi]`, lazily deleted
    /// entries excluded but not yet validated against the primary index.
    pub fn scan_raw(&self, lo: &[u8], hi: &[u8]) -> Vec<(Bytes, Bytes)> {
        let (lo, hi) = (lower_bound(lo), upper_bound(hi));
        let mut cursors = vec![Cursor::over_memory(Arc::new(self.memory.range(&lo, &hi).cloned().collect()))];
        for c in &self.components {
            cursors.push(Cursor::over_memory(Arc::new(c.live_range(&lo, &hi))));
        }
        ReconcileIter::new(cursors)
            .filter(|e| !e.is_tombstone())
            .filter_map(|e| split_composite(&e.key))
            .collect()
    }

    pub fn maybe_merge(&mut self) -> Result<Option<MergeRecord>> {
        let sizes: Vec<u64> = self.components.iter().map(|c| c.data.size()).collect();
        match pick_merge(&sizes, self.merge_ratio) {
            Some(oldest) => self.merge(oldest, sizes).map(Some),
            None => Ok(None),
        }
    }

    pub fn merge_until_quiescent(&mut self) -> Result<usize> {
        let mut n = 0;
        while self.maybe_merge()?.is_some() {
            n += 1;
        }
        Ok(n)
    }

    /// Merges every disk component into one.
    pub fn force_full_merge(&mut self) -> Result<Option<MergeRecord>> {
        if self.components.is_empty() {
            return Ok(None);
        }
        let sizes: Vec<u64> = self.components.iter().map(|c| c.data.size()).collect();
        self.merge(self.components.len() - 1, sizes).map(Some)
    }

    fn merge(&mut self, oldest: usize, sizes: Vec<u64>) -> Result<MergeRecord> {
        let inputs = &self.components[..=oldest];
        let cursors = inputs
            .iter()
            .map(|c| Cursor::over_memory(Arc::new(c.data.entries().iter().filter(|e| !c.hides(e)).cloned().collect())))
            .collect();
        let entries: Vec<Entry> = ReconcileIter::new(cursors).collect();
        let output_entries = entries.len();
        let output = if entries.is_empty() {
            None
        } else {
            let file = self.new_file(&entries);
            Some(DiskComponent::write(&self.env, file, BucketId::root(), entries, self.bits_per_key)?)
        };
        let mut next: Vec<_> = output
            .iter()
            .map(|c| SecondaryComponent { data: c.clone(), deleted: BTreeSet::new() })
            .collect();
        next.extend(self.components[oldest + 1..].iter().cloned());
        if let Err(e) = self.force(&next, self.flushed_lsn) {
            if let Some(o) = &output {
                o.mark_obsolete();
            }
            return Err(e);
        }
        let retired = std::mem::replace(&mut self.components, next);
        for c in &retired[..=oldest] {
            c.data.mark_obsolete();
        }
        let record = MergeRecord {
            bucket: BucketId::root(),
            younger_total: sizes[..oldest].iter().sum(),
            oldest_size: sizes[oldest],
            sizes,
            oldest_index: oldest,
            output_entries,
            tombstones_dropped: 0,
        };
        self.merges.push(record.clone());
        Ok(record)
    }

    /// Files referenced by the persisted metadata.
    pub fn referenced_files(&self) -> Vec<String> {
        self.components.iter().map(|c| c.data.file().to_string()).collect()
    }

    /// Number of entries per lazily deleted bucket still physically present.
    pub fn physical_entries_in(&self, bucket: BucketId) -> usize {
        self.components
            .iter()
            .flat_map(|c| c.data.entries())
            .filter_map(|e| split_composite(&e.key))
            .filter(|(_, pk)| bucket.contains_key(pk))
            .count()
    }
}

/// Groups `(secondary key, primary key)` hits by primary key.
pub fn hits_by_key(hits: Vec<(Bytes, Bytes)>) -> BTreeMap<Bytes, Vec<Bytes>> {
    let mut out: BTreeMap<Bytes, Vec<Bytes>> = BTreeMap::new();
    for (sec, pk) in hits {
        out.entry(pk).or_default().push(sec);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn composite_order_matches_pair_order(
            a in proptest::collection::vec(0u8..4, 0..5), pa in proptest::collection::vec(0u8..4, 0..4),
            b in proptest::collection::vec(0u8..4, 0..5), pb in proptest::collection::vec(0u8..4, 0..4),
        ) {
            let ka = composite_key(&a, &pa);
            let kb = composite_key(&b, &pb);
            prop_assert_eq!(ka.cmp(&kb), (&a, &pa).cmp(&(&b, &pb)));
            prop_assert_eq!(split_composite(&ka), Some((Bytes::from(a.clone()), Bytes::from(pa.clone()))));
            prop_assert!(lower_bound(&a) <= ka.to_vec());
            prop_assert!(ka.to_vec() < upper_bound(&a));
            if a < b {
                prop_assert!(upper_bound(&a) < kb.to_vec());
            }
        }
    }

    #[test]
    fn lazy_delete_hides_then_merge_removes() {
        let (env, _) = Env::in_memory();
        let mut idx = SecondaryIndex::create(env.clone(), "p/secondary", 10, 1.2).unwrap();
        let b = BucketId::new(1, 1).unwrap();
        let keys: Vec<Vec<u8>> = (0..64u32).map(|i| i.to_be_bytes().to_vec()).collect();
        for (i, k) in keys.iter().enumerate() {
            idx.insert(b"s", k, i as u64 + 1);
        }
        let in_b = keys.iter().filter(|k| b.contains_key(k)).count();
        assert!(in_b > 0);
        idx.mark_deleted(b).unwrap();
        assert_eq!(idx.flushed_lsn(), 64);
        assert_eq!(idx.scan_raw(b"s", b"s").len(), 64 - in_b);
        assert_eq!(idx.physical_entries_in(b), in_b);

        let reopened = SecondaryIndex::open(env.restart(), "p/secondary", 10, 1.2).unwrap();
        assert_eq!(reopened.scan_raw(b"s", b"s").len(), 64 - in_b);

        idx.insert(b"t", &keys[0], 100);
        idx.flush().unwrap();
        idx.force_full_merge().unwrap();
        assert_eq!(idx.physical_entries_in(b), 0);
        assert_eq!(idx.components().len(), 1);
        assert!(idx.components()[0].deleted.is_empty());
    }

    #[test]
    fn range_bounds_are_exact() {
        let (env, _) = Env::in_memory();
        let mut idx = SecondaryIndex::create(env, "p/secondary", 10, 1.2).unwrap();
        for (i, s) in [&b"a"[..], b"a\0", b"ab", b"b", b"b\0\0", b"c"].iter().enumerate() {
            idx.insert(s, &[i as u8 + 1], i as u64 + 1);
        }
        let secs = |lo: &[u8], hi: &[u8]| -> Vec<Bytes> { idx.scan_raw(lo, hi).into_iter().map(|h| h.0).collect() };
        assert_eq!(secs(b"a", b"ab"), vec![Bytes::from_static(b"a"), Bytes::from_static(b"a\0"), Bytes::from_static(b"ab")]);
        assert_eq!(secs(b"a\0", b"b"), vec![Bytes::from_static(b"a\0"), Bytes::from_static(b"ab"), Bytes::from_static(b"b")]);
        assert_eq!(secs(b"bb", b"bz").len(), 0);
    }
}
