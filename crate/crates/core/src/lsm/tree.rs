//! The bucketed primary index of one partition.
//!
//! Every bucket is its own LSM-tree (memory component plus a newest-first
//! list of disk and reference components). A local directory maps bucket
//! ids to buckets and is persisted as `<prefix>/directory.meta`; that file is
//! the only source of truth for which buckets and components are valid
//! after a restart.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::component::{component_file_name, Component, ComponentRecord, DiskComponent};
use super::entry::Entry;
use super::iter::{Cursor, OrderedMerge, ReconcileIter};
use super::memtable::MemTable;
use super::policy::{pick_merge, MergeRecord, DEFAULT_MERGE_RATIO};
use crate::directory::{hash_key, BucketId};
use crate::error::{Error, Result};
use crate::storage::Env;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmOptions {
    /// A bucket whose components exceed this many bytes is split.
    pub split_threshold_bytes: u64,
    pub merge_ratio: f64,
    pub bloom_bits_per_key: usize,
}

impl Default for LsmOptions {
    fn default() -> Self {
        Self { split_threshold_bytes: 4 << 20, merge_ratio: DEFAULT_MERGE_RATIO, bloom_bits_per_key: 10 }
    }
}

#[derive(Debug)]
pub struct BucketState {
    memory: MemTable,
    flushing: Option<Arc<MemTable>>,
    components: Arc<Vec<Component>>,
    /// WAL records at or below this lsn are already in disk components.
    replay_from: u64,
    /// WAL records at or below this lsn predate the bucket on this partition.
    created_lsn: u64,
    /// Set once the bucket has been split or removed; writers must re-route.
    retired: bool,
}

#[derive(Debug)]
pub struct Bucket {
    id: BucketId,
    state: RwLock<BucketState>,
    merge_pauses: AtomicUsize,
    merging: Mutex<bool>,
    merge_done: Condvar,
}

impl Bucket {
    fn new(id: BucketId, components: Vec<Component>, replay_from: u64, created_lsn: u64) -> Arc<Self> {
        Arc::new(Self {
            id,
            state: RwLock::new(BucketState {
                memory: MemTable::new(),
                flushing: None,
                components: Arc::new(components),
                replay_from,
                created_lsn,
                retired: false,
            }),
            merge_pauses: AtomicUsize::new(0),
            merging: Mutex::new(false),
            merge_done: Condvar::new(),
        })
    }

    pub fn id(&self) -> BucketId {
        self.id
    }

    pub fn components(&self) -> Arc<Vec<Component>> {
        self.state.read().components.clone()
    }

    pub fn memory_len(&self) -> usize {
        let st = self.state.read();
        st.memory.len() + st.flushing.as_ref().map_or(0, |f| f.len())
    }

    pub fn memory_bytes(&self) -> usize {
        let st = self.state.read();
        st.memory.bytes() + st.flushing.as_ref().map_or(0, |f| f.bytes())
    }

    /// Estimated on-disk size, counting reference components by the share of
    /// their target they expose.
    pub fn disk_size(&self) -> u64 {
        self.state.read().components.iter().map(Component::estimated_size).sum()
    }

    pub fn replay_from(&self) -> u64 {
        self.state.read().replay_from
    }

    pub fn created_lsn(&self) -> u64 {
        self.state.read().created_lsn
    }

    pub fn merges_paused(&self) -> bool {
        self.merge_pauses.load(Ordering::Acquire) > 0
    }

    fn wait_for_merges(&self) {
        let mut m = self.merging.lock();
        while *m {
            self.merge_done.wait(&mut m);
        }
    }

    /// Cursors over the bucket's current contents in `[lo, hi]`, or over
    /// everything when `range` is `None`.
    fn cursors(&self, range: Option<(&[u8], &[u8])>) -> Vec<Cursor> {
        let st = self.state.read();
        let mem = |t: &MemTable| -> Cursor {
            let v: Vec<Entry> = match range {
                Some((lo, hi)) => t.range(lo, hi).cloned().collect(),
                None => t.iter().cloned().collect(),
            };
            Cursor::over_memory(Arc::new(v))
        };
        let mut cursors = Vec::with_capacity(st.components.len() + 2);
        cursors.push(mem(&st.memory));
        if let Some(f) = &st.flushing {
            cursors.push(mem(f));
        }
        for c in st.components.iter() {
            cursors.push(match range {
                Some((lo, hi)) => Cursor::over_component(c, lo, hi),
                None => Cursor::over_all(c),
            });
        }
        cursors
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct BucketMeta {
    components: Vec<ComponentRecord>,
    replay_from: u64,
    created_lsn: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct DirectoryMeta {
    next_uid: u64,
    #[serde(with = "crate::directory::bucket_map")]
    buckets: BTreeMap<BucketId, BucketMeta>,
}

#[derive(Default)]
struct LocalDirectory {
    buckets: BTreeMap<BucketId, Arc<Bucket>>,
    depths: BTreeSet<u32>,
}

impl LocalDirectory {
    fn from_buckets(buckets: BTreeMap<BucketId, Arc<Bucket>>) -> Self {
        let depths = buckets.keys().map(|b| b.depth()).collect();
        Self { buckets, depths }
    }

    fn find(&self, hash: u64) -> Option<&Arc<Bucket>> {
        self.depths
            .iter()
            .find_map(|d| self.buckets.get(&BucketId::of_hash(hash, *d)))
    }
}

#[derive(Debug, Default)]
pub struct LsmStats {
    /// Component probes that passed the Bloom filter.
    pub disk_reads: AtomicU64,
    pub bloom_skips: AtomicU64,
    pub flushes: AtomicU64,
    pub splits: AtomicU64,
}

/// The result of a flush that produced a component.
#[derive(Clone, Debug)]
pub struct FlushOutcome {
    pub component: Arc<DiskComponent>,
    pub entries: usize,
}

pub struct BucketedLsm {
    env: Env,
    prefix: String,
    opts: LsmOptions,
    directory: RwLock<Arc<LocalDirectory>>,
    meta: Mutex<DirectoryMeta>,
    next_uid: AtomicU64,
    splits_disabled: AtomicUsize,
    merges: Mutex<Vec<MergeRecord>>,
    stats: LsmStats,
}

impl std::fmt::Debug for BucketedLsm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BucketedLsm")
            .field("prefix", &self.prefix)
            .field("buckets", &self.bucket_ids())
            .finish()
    }
}

impl BucketedLsm {
    fn meta_file(prefix: &str) -> String {
        format!("{prefix}/directory.meta")
    }

    /// Creates an empty tree owning `buckets` and forces its metadata.
    pub fn create(env: Env, prefix: &str, opts: LsmOptions, buckets: &[BucketId]) -> Result<Self> {
        for (i, a) in buckets.iter().enumerate() {
            if buckets[i + 1..].iter().any(|b| a.overlaps(b)) {
                return Err(Error::CorruptDirectory(format!("overlapping local buckets {a}")));
            }
        }
        let map = buckets.iter().map(|b| (*b, Bucket::new(*b, Vec::new(), 0, 0))).collect();
        let meta = DirectoryMeta {
            next_uid: 0,
            buckets: buckets.iter().map(|b| (*b, BucketMeta::default())).collect(),
        };
        let tree = Self::assemble(env, prefix, opts, map, meta);
        tree.force_meta(|_| {})?;
        Ok(tree)
    }

    /// Rebuilds the tree from its metadata file. Component files that the
    /// metadata does not reference (outputs of interrupted flushes, merges
    /// and splits) are deleted.
    pub fn open(env: Env, prefix: &str, opts: LsmOptions) -> Result<Self> {
        let file = Self::meta_file(prefix);
        let bytes = env.storage.get(&file)?.ok_or_else(|| Error::Corrupt {
            file: file.clone(),
            reason: "missing directory metadata".into(),
        })?;
        let meta: DirectoryMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corrupt { file: file.clone(), reason: e.to_string() })?;

        let mut opened: HashMap<String, Arc<DiskComponent>> = HashMap::new();
        let mut map = BTreeMap::new();
        for (id, bm) in &meta.buckets {
            let mut comps = Vec::with_capacity(bm.components.len());
            for rec in &bm.components {
                let target = match opened.get(&rec.file) {
                    Some(c) => c.clone(),
                    None => {
                        let c = DiskComponent::open(&env, &rec.file)?;
                        opened.insert(rec.file.clone(), c.clone());
                        c
                    }
                };
                comps.push(match rec.filter {
                    None => Component::Disk(target),
                    Some(filter) => Component::Reference { target, filter },
                });
            }
            map.insert(*id, Bucket::new(*id, comps, bm.replay_from, bm.created_lsn));
        }
        let own = format!("{prefix}/c-");
        for f in env.storage.list(&own)? {
            if !opened.contains_key(&f) {
                env.storage.delete(&f)?;
            }
        }
        Ok(Self::assemble(env, prefix, opts, map, meta))
    }

    fn assemble(env: Env, prefix: &str, opts: LsmOptions, map: BTreeMap<BucketId, Arc<Bucket>>, meta: DirectoryMeta) -> Self {
        let next_uid = meta.next_uid;
        Self {
            env,
            prefix: prefix.to_string(),
            opts,
            directory: RwLock::new(Arc::new(LocalDirectory::from_buckets(map))),
            meta: Mutex::new(meta),
            next_uid: AtomicU64::new(next_uid),
            splits_disabled: AtomicUsize::new(0),
            merges: Mutex::new(Vec::new()),
            stats: LsmStats::default(),
        }
    }

    /// Applies `edit` to a copy of the metadata image, forces it, and only
    /// then publishes the copy.
    fn force_meta(&self, edit: impl FnOnce(&mut DirectoryMeta)) -> Result<()> {
        let mut guard = self.meta.lock();
        let mut next = guard.clone();
        edit(&mut next);
        next.next_uid = self.next_uid.load(Ordering::Acquire);
        let bytes = serde_json::to_vec(&next).expect("metadata serializes");
        self.env.storage.put(&Self::meta_file(&self.prefix), &bytes)?;
        *guard = next;
        Ok(())
    }

    fn bucket_meta(st: &BucketState) -> BucketMeta {
        BucketMeta {
            components: st.components.iter().map(Component::record).collect(),
            replay_from: st.replay_from,
            created_lsn: st.created_lsn,
        }
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn options(&self) -> &LsmOptions {
        &self.opts
    }

    pub fn stats(&self) -> &LsmStats {
        &self.stats
    }

    pub fn merge_log(&self) -> Vec<MergeRecord> {
        self.merges.lock().clone()
    }

    pub fn bucket_ids(&self) -> Vec<BucketId> {
        self.directory.read().buckets.keys().copied().collect()
    }

    pub fn bucket(&self, id: BucketId) -> Option<Arc<Bucket>> {
        self.directory.read().buckets.get(&id).cloned()
    }

    pub fn bucket_for_hash(&self, hash: u64) -> Option<Arc<Bucket>> {
        self.directory.read().find(hash).cloned()
    }

    fn bucket_for_key(&self, key: &[u8]) -> Result<Arc<Bucket>> {
        let hash = hash_key(key);
        self.bucket_for_hash(hash).ok_or(Error::WrongPartition { hash })
    }

    pub fn owns_key(&self, key: &[u8]) -> bool {
        self.bucket_for_hash(hash_key(key)).is_some()
    }

    /// Adds an entry to the memory component of the key's bucket.
    pub fn write(&self, entry: Entry) -> Result<BucketId> {
        if entry.key.is_empty() {
            return Err(Error::EmptyKey);
        }
        loop {
            let bucket = self.bucket_for_key(&entry.key)?;
            let mut st = bucket.state.write();
            if st.retired {
                continue;
            }
            st.memory.insert(entry);
            return Ok(bucket.id);
        }
    }

    pub fn put(&self, key: impl Into<Bytes>, value: impl Into<Bytes>, seq: u64) -> Result<BucketId> {
        self.write(Entry::put(key, value, seq))
    }

    pub fn delete(&self, key: impl Into<Bytes>, seq: u64) -> Result<BucketId> {
        self.write(Entry::tombstone(key, seq))
    }

    /// Newest entry for `key` (possibly a tombstone), consulting only the
    /// key's bucket.
    pub fn get_entry(&self, key: &[u8]) -> Result<Option<Entry>> {
        loop {
            let bucket = self.bucket_for_key(key)?;
            let st = bucket.state.read();
            if st.retired {
                continue;
            }
            if let Some(e) = st.memory.get(key) {
                return Ok(Some(e.clone()));
            }
            if let Some(e) = st.flushing.as_ref().and_then(|f| f.get(key)) {
                return Ok(Some(e.clone()));
            }
            for c in st.components.iter() {
                if !c.visible(key) {
                    continue;
                }
                if !c.may_contain(key) {
                    self.stats.bloom_skips.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                self.stats.disk_reads.fetch_add(1, Ordering::Relaxed);
                if let Some(e) = c.get(key) {
                    return Ok(Some(e.clone()));
                }
            }
            return Ok(None);
        }
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Bytes>> {
        Ok(self
            .get_entry(key)?
            .filter(|e| !e.is_tombstone())
            .map(|e| e.value))
    }

    /// Live entries with keys in `[lo, hi]`. Unordered scans concatenate the
    /// per-bucket streams; ordered scans merge them into key order. Either
    /// way the scan works on a snapshot taken now.
    pub fn scan(&self, lo: &[u8], hi: &[u8], ordered: bool) -> Box<dyn Iterator<Item = Entry> + Send> {
        self.scan_range(Some((lo, hi)), ordered)
    }

    /// Every live entry of the partition.
    pub fn scan_all(&self, ordered: bool) -> Box<dyn Iterator<Item = Entry> + Send> {
        self.scan_range(None, ordered)
    }

    fn scan_range(&self, range: Option<(&[u8], &[u8])>, ordered: bool) -> Box<dyn Iterator<Item = Entry> + Send> {
        let dir = self.directory.read().clone();
        let streams: Vec<_> = dir
            .buckets
            .values()
            .map(|b| ReconcileIter::new(b.cursors(range)))
            .collect();
        if ordered {
            Box::new(OrderedMerge::new(streams).filter(|e| !e.is_tombstone()))
        } else {
            Box::new(streams.into_iter().flatten().filter(|e| !e.is_tombstone()))
        }
    }

    /// Live entries of one bucket, in key order, over a snapshot of its
    /// current components only (memory excluded).
    pub fn scan_components(components: &[Component]) -> impl Iterator<Item = Entry> + Send {
        let cursors = components
            .iter()
            .map(Cursor::over_all)
            .collect();
        ReconcileIter::new(cursors).filter(|e| !e.is_tombstone())
    }

    pub fn memory_bytes(&self) -> usize {
        self.directory.read().buckets.values().map(|b| b.memory_bytes()).sum()
    }

    pub fn largest_memory_bucket(&self) -> Option<(BucketId, usize)> {
        self.directory
            .read()
            .buckets
            .values()
            .map(|b| (b.id, b.memory_bytes()))
            .filter(|(_, n)| *n > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
    }

    fn next_file(&self, bucket: BucketId, entries: &[Entry]) -> String {
        let uid = self.next_uid.fetch_add(1, Ordering::AcqRel);
        let min = entries.iter().map(|e| e.seq).min().unwrap_or(0);
        let max = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        component_file_name(&self.prefix, bucket, min, max, uid)
    }

    fn write_component(&self, bucket: BucketId, entries: Vec<Entry>) -> Result<Arc<DiskComponent>> {
        let file = self.next_file(bucket, &entries);
        DiskComponent::write(&self.env, file, bucket, entries, self.opts.bloom_bits_per_key)
    }

    /// Writes an immutable component for a bucket that is not (yet) in this
    /// tree, e.g. data received from another partition.
    pub fn write_detached(&self, prefix: &str, bucket: BucketId, entries: Vec<Entry>) -> Result<Arc<DiskComponent>> {
        let uid = self.next_uid.fetch_add(1, Ordering::AcqRel);
        let min = entries.iter().map(|e| e.seq).min().unwrap_or(0);
        let max = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        let file = component_file_name(prefix, bucket, min, max, uid);
        DiskComponent::write(&self.env, file, bucket, entries, self.opts.bloom_bits_per_key)
    }

    fn existing(&self, id: BucketId) -> Result<Arc<Bucket>> {
        self.bucket(id).ok_or(Error::UnknownBucket(id))
    }

    /// Moves the memory component aside so that new writes go to a fresh
    /// one while it is written out. Returns false when there is nothing to
    /// flush or a flush is already pending.
    pub fn begin_flush(&self, id: BucketId) -> Result<bool> {
        let bucket = self.existing(id)?;
        let mut st = bucket.state.write();
        if st.memory.is_empty() || st.flushing.is_some() {
            return Ok(false);
        }
        let table = std::mem::take(&mut st.memory);
        st.flushing = Some(Arc::new(table));
        Ok(true)
    }

    /// Writes the pending flush (see [`BucketedLsm::begin_flush`]) as the
    /// newest disk component and forces the metadata.
    pub fn finish_flush(&self, id: BucketId) -> Result<Option<FlushOutcome>> {
        let bucket = self.existing(id)?;
        let Some(table) = bucket.state.read().flushing.clone() else {
            return Ok(None);
        };
        let written = self.write_component(id, table.iter().cloned().collect());
        let mut st = bucket.state.write();
        self.install_flush(&bucket, &mut st, table, written)
    }

    fn install_flush(
        &self,
        bucket: &Bucket,
        st: &mut BucketState,
        table: Arc<MemTable>,
        written: Result<Arc<DiskComponent>>,
    ) -> Result<Option<FlushOutcome>> {
        let restore = |st: &mut BucketState| {
            st.flushing = None;
            let newer = std::mem::take(&mut st.memory);
            st.memory = (*table).clone();
            let mut merged = newer;
            merged.absorb_older(std::mem::take(&mut st.memory));
            st.memory = merged;
        };
        let component = match written {
            Ok(c) => c,
            Err(e) => {
                restore(st);
                return Err(flush_error(bucket.id, e));
            }
        };
        let mut comps = Vec::with_capacity(st.components.len() + 1);
        comps.push(Component::Disk(component.clone()));
        comps.extend(st.components.iter().cloned());
        let previous = std::mem::replace(&mut st.components, Arc::new(comps));
        let previous_replay = st.replay_from;
        st.replay_from = st.replay_from.max(table.max_seq());
        let meta = Self::bucket_meta(st);
        let forced = self.env.point("flush.before-force").and_then(|_| {
            self.force_meta(|m| {
                m.buckets.insert(bucket.id, meta);
            })
        });
        if let Err(e) = forced {
            st.components = previous;
            st.replay_from = previous_replay;
            restore(st);
            component.mark_obsolete();
            return Err(flush_error(bucket.id, e));
        }
        st.flushing = None;
        self.stats.flushes.fetch_add(1, Ordering::Relaxed);
        Ok(Some(FlushOutcome { entries: component.entries().len(), component }))
    }

    /// Flush while holding the bucket latch: completes any pending flush and
    /// then writes out the current memory component.
    fn flush_latched(&self, bucket: &Bucket, st: &mut BucketState) -> Result<()> {
        if let Some(table) = st.flushing.clone() {
            let written = self.write_component(bucket.id, table.iter().cloned().collect());
            self.install_flush(bucket, st, table, written)?;
        }
        if !st.memory.is_empty() {
            let table = Arc::new(std::mem::take(&mut st.memory));
            st.flushing = Some(table.clone());
            let written = self.write_component(bucket.id, table.iter().cloned().collect());
            self.install_flush(bucket, st, table, written)?;
        }
        Ok(())
    }

    /// Synchronous flush: new writers to this bucket wait until it is done.
    pub fn flush(&self, id: BucketId) -> Result<Option<FlushOutcome>> {
        let bucket = self.existing(id)?;
        let mut st = bucket.state.write();
        let before = st.components.len();
        self.flush_latched(&bucket, &mut st)?;
        Ok((st.components.len() > before).then(|| {
            let c = st.components[0].target().clone();
            FlushOutcome { entries: c.entries().len(), component: c }
        }))
    }

    pub fn flush_all(&self) -> Result<()> {
        for id in self.bucket_ids() {
            self.flush(id)?;
        }
        Ok(())
    }

    pub fn pause_merges(&self, id: BucketId) -> Result<()> {
        let bucket = self.existing(id)?;
        bucket.merge_pauses.fetch_add(1, Ordering::AcqRel);
        bucket.wait_for_merges();
        Ok(())
    }

    pub fn resume_merges(&self, id: BucketId) -> Result<()> {
        let bucket = self.existing(id)?;
        let _ = bucket
            .merge_pauses
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1));
        Ok(())
    }

    /// Runs one merge if the tiering policy selects a sequence.
    pub fn maybe_merge(&self, id: BucketId) -> Result<Option<MergeRecord>> {
        let bucket = self.existing(id)?;
        if bucket.merges_paused() {
            return Ok(None);
        }
        let comps = bucket.components();
        let sizes: Vec<u64> = comps.iter().map(Component::estimated_size).collect();
        let Some(oldest) = pick_merge(&sizes, self.opts.merge_ratio) else {
            return Ok(None);
        };
        {
            let mut m = bucket.merging.lock();
            if *m {
                return Ok(None);
            }
            *m = true;
        }
        let result = self.run_merge(&bucket, &comps, &sizes, oldest);
        *bucket.merging.lock() = false;
        bucket.merge_done.notify_all();
        result.map(Some)
    }

    fn run_merge(&self, bucket: &Bucket, comps: &[Component], sizes: &[u64], oldest: usize) -> Result<MergeRecord> {
        let inputs = &comps[..=oldest];
        let to_bottom = oldest + 1 == comps.len();
        let mut tombstones_dropped = 0;
        let entries: Vec<Entry> = {
            let cursors = inputs
                .iter()
                .map(Cursor::over_all)
                .collect();
            ReconcileIter::new(cursors)
                .filter(|e| bucket.id.contains_key(&e.key))
                .filter(|e| {
                    if to_bottom && e.is_tombstone() {
                        tombstones_dropped += 1;
                        false
                    } else {
                        true
                    }
                })
                .collect()
        };
        let output_entries = entries.len();
        let output = if entries.is_empty() { None } else { Some(self.write_component(bucket.id, entries)?) };

        let mut st = bucket.state.write();
        let current = st.components.clone();
        let start = current
            .iter()
            .position(|c| same_component(c, &inputs[0]))
            .filter(|&s| {
                current.len() >= s + inputs.len()
                    && current[s..s + inputs.len()].iter().zip(inputs).all(|(a, b)| same_component(a, b))
            })
            .ok_or_else(|| Error::Corrupt { file: self.prefix.clone(), reason: "merge inputs vanished".into() })?;
        let mut next: Vec<Component> = current[..start].to_vec();
        next.extend(output.iter().cloned().map(Component::Disk));
        next.extend(current[start + inputs.len()..].iter().cloned());
        st.components = Arc::new(next);
        let meta = Self::bucket_meta(&st);
        let forced = self
            .env
            .point("merge.before-force")
            .and_then(|_| self.force_meta(|m| {
                m.buckets.insert(bucket.id, meta);
            }));
        if let Err(e) = forced {
            st.components = current;
            if let Some(o) = &output {
                o.mark_obsolete();
            }
            return Err(e);
        }
        drop(st);
        for c in inputs {
            c.target().mark_obsolete();
        }
        let record = MergeRecord {
            bucket: bucket.id,
            sizes: sizes.to_vec(),
            oldest_index: oldest,
            younger_total: sizes[..oldest].iter().sum(),
            oldest_size: sizes[oldest],
            output_entries,
            tombstones_dropped,
        };
        self.merges.lock().push(record.clone());
        Ok(record)
    }

    /// Merges until the policy selects nothing.
    pub fn merge_until_quiescent(&self, id: BucketId) -> Result<usize> {
        let mut n = 0;
        while self.maybe_merge(id)?.is_some() {
            n += 1;
        }
        Ok(n)
    }

    /// Merges every component of the bucket into one, regardless of policy.
    pub fn force_full_merge(&self, id: BucketId) -> Result<Option<MergeRecord>> {
        let bucket = self.existing(id)?;
        let comps = bucket.components();
        if comps.is_empty() || (comps.len() == 1 && !comps[0].is_reference()) {
            return Ok(None);
        }
        let sizes: Vec<u64> = comps.iter().map(Component::estimated_size).collect();
        *bucket.merging.lock() = true;
        let r = self.run_merge(&bucket, &comps, &sizes, comps.len() - 1);
        *bucket.merging.lock() = false;
        bucket.merge_done.notify_all();
        r.map(Some)
    }

    pub fn disable_splits(&self) {
        self.splits_disabled.fetch_add(1, Ordering::AcqRel);
    }

    pub fn enable_splits(&self) {
        let _ = self
            .splits_disabled
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1));
    }

    pub fn splits_disabled(&self) -> bool {
        self.splits_disabled.load(Ordering::Acquire) > 0
    }

    pub fn needs_split(&self, id: BucketId) -> bool {
        self.bucket(id)
            .is_some_and(|b| b.disk_size() > self.opts.split_threshold_bytes)
    }

    /// Splits a bucket into its two children without rewriting data.
    ///
    /// Merges are paused and drained, the memory component is flushed
    /// without blocking writers, and then, under the bucket latch, residual
    /// writes are flushed and two children are created whose components are
    /// references to the parent's. Forcing the directory metadata makes the
    /// split durable; until then recovery sees only the parent.
    pub fn split(&self, id: BucketId) -> Result<(BucketId, BucketId)> {
        if self.splits_disabled() {
            return Err(Error::SplitsDisabled);
        }
        let parent = self.existing(id)?;
        let env = &self.env;
        self.pause_merges(id)?;
        let outcome = (|| {
            env.point("split.after-merge-pause")?;
            self.begin_flush(id)?;
            self.finish_flush(id)?;
            env.point("split.after-async-flush")?;

            let mut st = parent.state.write();
            self.flush_latched(&parent, &mut st)?;
            env.point("split.after-sync-flush")?;

            let (left, right) = id.split();
            let children: Vec<Arc<Bucket>> = [left, right]
                .into_iter()
                .map(|child| {
                    let refs = st.components.iter().map(|c| c.narrowed(child)).collect();
                    Bucket::new(child, refs, st.replay_from, st.created_lsn)
                })
                .collect();
            env.point("split.after-children-created")?;

            let mut map = self.directory.read().buckets.clone();
            map.remove(&id);
            for c in &children {
                map.insert(c.id, c.clone());
            }
            let metas: Vec<(BucketId, BucketMeta)> = children
                .iter()
                .map(|c| (c.id, Self::bucket_meta(&c.state.read())))
                .collect();
            self.force_meta(|m| {
                m.buckets.remove(&id);
                m.buckets.extend(metas);
            })?;
            env.point("split.after-metadata-force")?;
            *self.directory.write() = Arc::new(LocalDirectory::from_buckets(map));
            st.retired = true;
            Ok((left, right))
        })();
        let _ = parent
            .merge_pauses
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1));
        if outcome.is_ok() {
            self.stats.splits.fetch_add(1, Ordering::Relaxed);
        }
        outcome
    }

    /// Registers a bucket built elsewhere. Installing a bucket that is
    /// already present is a no-op and returns false.
    pub fn install_bucket(
        &self,
        id: BucketId,
        components: Vec<Arc<DiskComponent>>,
        replay_from: u64,
        created_lsn: u64,
    ) -> Result<bool> {
        if self.bucket(id).is_some() {
            return Ok(false);
        }
        if let Some(clash) = self.bucket_ids().into_iter().find(|b| b.overlaps(&id)) {
            return Err(Error::CorruptDirectory(format!("installing {id} overlaps local bucket {clash}")));
        }
        let bucket = Bucket::new(id, components.into_iter().map(Component::Disk).collect(), replay_from, created_lsn);
        let meta = Self::bucket_meta(&bucket.state.read());
        self.force_meta(|m| {
            m.buckets.insert(id, meta);
        })?;
        let mut map = self.directory.read().buckets.clone();
        map.insert(id, bucket);
        *self.directory.write() = Arc::new(LocalDirectory::from_buckets(map));
        Ok(true)
    }

    /// Removes a bucket from the local directory. Readers that already hold
    /// it finish normally; its files go away with the last reference.
    pub fn remove_bucket(&self, id: BucketId) -> Result<Option<Arc<Bucket>>> {
        let Some(bucket) = self.bucket(id) else {
            return Ok(None);
        };
        let mut st = bucket.state.write();
        self.force_meta(|m| {
            m.buckets.remove(&id);
        })?;
        let mut map = self.directory.read().buckets.clone();
        map.remove(&id);
        *self.directory.write() = Arc::new(LocalDirectory::from_buckets(map));
        st.retired = true;
        for c in st.components.iter() {
            c.target().mark_obsolete();
        }
        drop(st);
        Ok(Some(bucket))
    }

    /// Files referenced by the persisted metadata.
    pub fn referenced_files(&self) -> HashSet<String> {
        self.meta
            .lock()
            .buckets
            .values()
            .flat_map(|b| b.components.iter().map(|c| c.file.clone()))
            .collect()
    }

    /// Buckets listed in the persisted metadata.
    pub fn persisted_buckets(&self) -> Vec<BucketId> {
        self.meta.lock().buckets.keys().copied().collect()
    }
}

fn same_component(a: &Component, b: &Component) -> bool {
    Arc::ptr_eq(a.target(), b.target()) && a.filter() == b.filter()
}

fn flush_error(bucket: BucketId, e: Error) -> Error {
    if e.is_crash() {
        e
    } else {
        Error::FlushFailed { bucket, reason: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::MemStorage;

    fn key(i: u32) -> Vec<u8> {
        i.to_be_bytes().to_vec()
    }

    fn tree(buckets: &[BucketId]) -> (BucketedLsm, Env, MemStorage) {
        let (env, mem) = Env::in_memory();
        let t = BucketedLsm::create(env.clone(), "p0/primary", LsmOptions::default(), buckets).unwrap();
        (t, env, mem)
    }

    fn b(bits: u64, depth: u32) -> BucketId {
        BucketId::new(bits, depth).unwrap()
    }

    #[test]
    fn newest_write_wins_and_tombstones_hide() {
        let (t, _, _) = tree(&[BucketId::root()]);
        t.put(key(1), &b"v1"[..], 1).unwrap();
        t.put(key(1), &b"v2"[..], 2).unwrap();
        assert_eq!(t.get(&key(1)).unwrap().unwrap(), &b"v2"[..]);
        t.flush(BucketId::root()).unwrap();
        t.delete(key(1), 3).unwrap();
        assert_eq!(t.get(&key(1)).unwrap(), None);
        t.flush(BucketId::root()).unwrap();
        assert_eq!(t.get(&key(1)).unwrap(), None);
    }

    #[test]
    fn wrong_partition_for_unowned_suffix() {
        let (t, _, _) = tree(&[b(0, 1)]);
        let foreign = (0..).map(key).find(|k| hash_key(k) & 1 == 1).unwrap();
        assert!(matches!(t.put(foreign.clone(), &b"x"[..], 1), Err(Error::WrongPartition { .. })));
        assert!(matches!(t.get(&foreign), Err(Error::WrongPartition { .. })));
    }

    #[test]
    fn memory_hit_needs_no_disk_read() {
        let (t, _, _) = tree(&[BucketId::root()]);
        t.put(key(1), &b"v"[..], 1).unwrap();
        t.flush(BucketId::root()).unwrap();
        t.put(key(2), &b"w"[..], 2).unwrap();
        let before = t.stats().disk_reads.load(Ordering::Relaxed);
        assert!(t.get(&key(2)).unwrap().is_some());
        assert_eq!(t.stats().disk_reads.load(Ordering::Relaxed), before);
        assert!(t.get(&key(1)).unwrap().is_some());
        assert_eq!(t.stats().disk_reads.load(Ordering::Relaxed), before + 1);
    }

    #[test]
    fn flush_produces_sorted_component() {
        let (t, _, _) = tree(&[BucketId::root()]);
        for (i, k) in [5u32, 1, 3].iter().enumerate() {
            t.put(key(*k), &b"v"[..], i as u64 + 1).unwrap();
        }
        let out = t.flush(BucketId::root()).unwrap().unwrap();
        assert_eq!(out.entries, 3);
        let keys: Vec<_> = out.component.entries().iter().map(|e| e.key.clone()).collect();
        assert_eq!(keys, vec![key(1), key(3), key(5)]);
        assert_eq!(t.bucket(BucketId::root()).unwrap().memory_len(), 0);
        assert!(t.flush(BucketId::root()).unwrap().is_none());
    }

    #[test]
    fn async_flush_admits_new_writes() {
        let (t, _, _) = tree(&[BucketId::root()]);
        t.put(key(1), &b"a"[..], 1).unwrap();
        assert!(t.begin_flush(BucketId::root()).unwrap());
        t.put(key(2), &b"b"[..], 2).unwrap();
        let out = t.finish_flush(BucketId::root()).unwrap().unwrap();
        assert_eq!(out.entries, 1);
        assert!(out.component.get(&key(2)).is_none());
        assert_eq!(t.bucket(BucketId::root()).unwrap().memory_len(), 1);
        assert!(t.get(&key(2)).unwrap().is_some());
    }

    #[test]
    fn failed_flush_keeps_memory() {
        let (t, _, mem) = tree(&[BucketId::root()]);
        t.put(key(1), &b"a"[..], 1).unwrap();
        mem.fail_writes("p0/primary/c-", 1);
        assert!(matches!(t.flush(BucketId::root()), Err(Error::FlushFailed { .. })));
        assert_eq!(t.bucket(BucketId::root()).unwrap().memory_len(), 1);
        assert!(t.flush(BucketId::root()).unwrap().is_some());
    }

    #[test]
    fn scan_modes_agree_after_sorting() {
        let buckets: Vec<_> = (0..4).map(|i| b(i, 2)).collect();
        let (t, _, _) = tree(&buckets);
        for i in 0..200u32 {
            t.put(key(i), &b"v"[..], i as u64 + 1).unwrap();
            if i % 50 == 0 {
                t.flush_all().unwrap();
            }
        }
        let ordered: Vec<_> = t.scan(&key(20), &key(150), true).map(|e| e.key).collect();
        let mut unordered: Vec<_> = t.scan(&key(20), &key(150), false).map(|e| e.key).collect();
        assert!(ordered.windows(2).all(|w| w[0] < w[1]));
        unordered.sort();
        assert_eq!(ordered, unordered);
        assert_eq!(ordered.len(), 131);
    }

    #[test]
    fn split_creates_reference_children() {
        let parent = b(0b11, 2);
        let mut buckets: Vec<_> = (0..3).map(|i| b(i, 2)).collect();
        buckets.push(parent);
        let (t, env, _) = tree(&buckets);
        let keys: Vec<_> = (0..400u32).map(key).filter(|k| parent.contains_key(k)).collect();
        let (first, second) = keys.split_at(keys.len() / 2);
        for (i, k) in first.iter().enumerate() {
            t.put(k.clone(), &b"1"[..], i as u64 + 1).unwrap();
        }
        t.flush(parent).unwrap();
        for (i, k) in second.iter().enumerate() {
            t.put(k.clone(), &b"2"[..], 1000 + i as u64).unwrap();
        }
        t.flush(parent).unwrap();
        let c_new = t.bucket(parent).unwrap().components()[0].target().clone();
        let c_old = t.bucket(parent).unwrap().components()[1].target().clone();

        let (l, r) = t.split(parent).unwrap();
        assert_eq!((l, r), (b(0b011, 3), b(0b111, 3)));
        for child in [l, r] {
            let comps = t.bucket(child).unwrap().components();
            assert_eq!(comps.len(), 2);
            assert!(Arc::ptr_eq(comps[0].target(), &c_new));
            assert!(Arc::ptr_eq(comps[1].target(), &c_old));
            assert_eq!(comps[0].filter(), Some(child));
        }
        for k in &keys {
            assert!(t.get(k).unwrap().is_some());
        }
        let in_011 = keys.iter().find(|k| l.contains_key(k)).unwrap();
        let lbucket = t.bucket(r).unwrap();
        assert!(lbucket.components().iter().all(|c| c.get(in_011).is_none()));

        let reopened = BucketedLsm::open(env.restart(), "p0/primary", LsmOptions::default()).unwrap();
        assert!(reopened.bucket(parent).is_none());
        assert!(reopened.bucket(l).is_some() && reopened.bucket(r).is_some());
        for k in &keys {
            assert!(reopened.get(k).unwrap().is_some());
        }
    }

    #[test]
    fn split_refused_while_disabled() {
        let (t, _, _) = tree(&[BucketId::root()]);
        t.disable_splits();
        assert_eq!(t.split(BucketId::root()), Err(Error::SplitsDisabled));
        t.enable_splits();
        assert!(t.split(BucketId::root()).is_ok());
    }

    #[test]
    fn merge_materializes_only_filtered_keys() {
        let (t, _, _) = tree(&[BucketId::root()]);
        for i in 0..300u32 {
            t.put(key(i), &b"v"[..], i as u64 + 1).unwrap();
            if i % 100 == 99 {
                t.flush(BucketId::root()).unwrap();
            }
        }
        let (l, r) = t.split(BucketId::root()).unwrap();
        t.force_full_merge(l).unwrap();
        let comps = t.bucket(l).unwrap().components();
        assert_eq!(comps.len(), 1);
        assert!(!comps[0].is_reference());
        assert!(comps[0].target().entries().iter().all(|e| l.contains_key(&e.key)));
        let expected = (0..300u32).filter(|i| l.contains_key(&key(*i))).count();
        assert_eq!(comps[0].target().entries().len(), expected);
        // the sibling still reads through its references
        let right_keys = t.scan_all(true).filter(|e| r.contains_key(&e.key)).count();
        assert_eq!(right_keys, 300 - expected);
    }

    #[test]
    fn tombstones_purged_only_at_bottom() {
        let (t, _, _) = tree(&[BucketId::root()]);
        t.put(key(1), &b"v"[..], 1).unwrap();
        t.put(key(2), &b"v"[..], 2).unwrap();
        t.flush(BucketId::root()).unwrap();
        t.delete(key(1), 3).unwrap();
        t.flush(BucketId::root()).unwrap();
        t.put(key(3), &b"v"[..], 4).unwrap();
        t.flush(BucketId::root()).unwrap();
        let rec = t.force_full_merge(BucketId::root()).unwrap().unwrap();
        assert_eq!(rec.tombstones_dropped, 1);
        assert_eq!(t.get(&key(1)).unwrap(), None);
    }

    #[test]
    fn merges_respect_pause() {
        let (t, _, _) = tree(&[BucketId::root()]);
        for i in 0..4u32 {
            t.put(key(i), &b"v"[..], i as u64 + 1).unwrap();
            t.flush(BucketId::root()).unwrap();
        }
        t.pause_merges(BucketId::root()).unwrap();
        assert!(t.maybe_merge(BucketId::root()).unwrap().is_none());
        t.resume_merges(BucketId::root()).unwrap();
        assert!(t.maybe_merge(BucketId::root()).unwrap().is_some());
    }

    #[test]
    fn reader_survives_bucket_removal() {
        let (t, env, _) = tree(&[BucketId::root()]);
        for i in 0..50u32 {
            t.put(key(i), &b"v"[..], i as u64 + 1).unwrap();
        }
        t.flush(BucketId::root()).unwrap();
        let file = t.bucket(BucketId::root()).unwrap().components()[0].target().file().to_string();
        let mut scan = t.scan_all(false);
        assert!(scan.next().is_some());
        t.remove_bucket(BucketId::root()).unwrap();
        assert!(env.storage.get(&file).unwrap().is_some());
        assert_eq!(scan.count(), 49);
        assert!(env.storage.get(&file).unwrap().is_none());
        assert!(t.remove_bucket(BucketId::root()).unwrap().is_none());
    }

    #[test]
    fn install_is_idempotent_and_checks_overlap() {
        let (t, env, _) = tree(&[b(0, 1)]);
        let right = b(1, 1);
        let keys: Vec<_> = (0..40u32).map(key).filter(|k| right.contains_key(k)).collect();
        let mut entries: Vec<Entry> = keys.iter().map(|k| Entry::put(k.clone(), &b"x"[..], 7)).collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        let c = DiskComponent::write(&env, "p0/staged/c1".into(), right, entries, 10).unwrap();
        assert!(t.install_bucket(right, vec![c.clone()], 0, 0).unwrap());
        assert!(!t.install_bucket(right, vec![c], 0, 0).unwrap());
        assert!(t.get(&keys[0]).unwrap().is_some());
        assert!(t.install_bucket(b(0b10, 2), vec![], 0, 0).is_err());
    }
}
