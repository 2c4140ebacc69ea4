//! One node-controller partition: the bucketed primary index, a secondary
//! index, a write-ahead log, and any buckets staged by an in-flight
//! rebalance.

pub mod secondary;
pub mod staged;
pub mod value;
pub mod wal;

use std::collections::BTreeSet;
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::directory::{hash_key, BucketId, PartitionId};
use crate::error::{Error, Result};
use crate::lsm::{BucketedLsm, Component, Entry, EntryKind, LsmOptions};
use crate::storage::Env;
use secondary::SecondaryIndex;
use staged::Staged;
use value::{decode_value, encode_value};
use wal::{Wal, WalRecord};

pub use wal::WalRecord as LogRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub key: Bytes,
    pub payload: Bytes,
    pub secondary: Option<Bytes>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WriteOp {
    Put { key: Bytes, payload: Bytes, secondary: Option<Bytes> },
    Delete { key: Bytes },
}

impl WriteOp {
    pub fn key(&self) -> &Bytes {
        match self {
            WriteOp::Put { key, .. } | WriteOp::Delete { key } => key,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    pub lsm: LsmOptions,
    /// Shared budget for all memory components of the partition.
    pub memory_budget_bytes: usize,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self { lsm: LsmOptions::default(), memory_budget_bytes: 1 << 20 }
    }
}

/// What recovery found besides the rebuilt indexes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub replayed_primary: usize,
    pub replayed_secondary: usize,
    /// Rebalance whose staged buckets were prepared before the crash.
    pub prepared: Option<u64>,
    pub removed_files: usize,
}

fn decode_record(key: Bytes, value: &Bytes) -> Result<Record> {
    let (secondary, payload) = decode_value(value).ok_or_else(|| Error::Corrupt {
        file: format!("value of key {key:?}"),
        reason: "bad value encoding".into(),
    })?;
    Ok(Record { key, payload, secondary })
}

#[derive(Debug)]
pub struct Partition {
    id: PartitionId,
    env: Env,
    prefix: String,
    opts: PartitionOptions,
    primary: BucketedLsm,
    secondary: SecondaryIndex,
    wal: Wal,
    last_lsn: u64,
    staged: Option<Staged>,
}

impl Partition {
    pub fn prefix_of(id: PartitionId) -> String {
        format!("n{}/p{}", id.node, id.slot)
    }

    pub fn create(env: Env, id: PartitionId, opts: PartitionOptions, buckets: &[BucketId]) -> Result<Self> {
        let prefix = Self::prefix_of(id);
        let primary = BucketedLsm::create(env.clone(), &format!("{prefix}/primary"), opts.lsm.clone(), buckets)?;
        let secondary = SecondaryIndex::create(
            env.clone(),
            &format!("{prefix}/secondary"),
            opts.lsm.bloom_bits_per_key,
            opts.lsm.merge_ratio,
        )?;
        let wal = Wal::new(env.clone(), &prefix);
        Ok(Self { id, env, prefix, opts, primary, secondary, wal, last_lsn: 0, staged: None })
    }

    /// Rebuilds the partition after a restart: buckets and components come
    /// from the metadata files, unflushed writes from the WAL. Files that no
    /// metadata references are deleted.
    pub fn recover(env: Env, id: PartitionId, opts: PartitionOptions) -> Result<(Self, RecoveryReport)> {
        let prefix = Self::prefix_of(id);
        let primary = BucketedLsm::open(env.clone(), &format!("{prefix}/primary"), opts.lsm.clone())?;
        let mut secondary = SecondaryIndex::open(
            env.clone(),
            &format!("{prefix}/secondary"),
            opts.lsm.bloom_bits_per_key,
            opts.lsm.merge_ratio,
        )?;
        let staged = Staged::open(env.clone(), &prefix, opts.lsm.bloom_bits_per_key)?;
        let mut report = RecoveryReport { prepared: staged.as_ref().map(Staged::rebalance), ..Default::default() };

        let mut keep: BTreeSet<String> = primary.referenced_files().into_iter().collect();
        keep.extend(secondary.referenced_files());
        if let Some(s) = &staged {
            keep.extend(s.files());
        }
        for f in env.storage.list(&Staged::dir(&prefix))? {
            if !keep.contains(&f) {
                env.storage.delete(&f)?;
                report.removed_files += 1;
            }
        }

        let wal = Wal::new(env.clone(), &prefix);
        let mut last_lsn = secondary.flushed_lsn();
        for id in primary.bucket_ids() {
            let b = primary.bucket(id).expect("listed bucket");
            last_lsn = last_lsn.max(b.replay_from()).max(b.created_lsn());
        }
        for rec in wal.read_all()? {
            last_lsn = last_lsn.max(rec.lsn);
            let Some(bucket) = primary.bucket_for_hash(hash_key(&rec.key)) else {
                continue;
            };
            if rec.lsn <= bucket.created_lsn() {
                continue;
            }
            if rec.lsn > bucket.replay_from() {
                primary.write(Self::entry_of(&rec))?;
                report.replayed_primary += 1;
            }
            if let (EntryKind::Put, Some(sec)) = (rec.kind, &rec.secondary_key) {
                if rec.lsn > secondary.flushed_lsn() {
                    secondary.insert(sec, &rec.key, rec.lsn);
                    report.replayed_secondary += 1;
                }
            }
        }
        let mut p = Self { id, env, prefix, opts, primary, secondary, wal, last_lsn, staged };
        p.enforce_memory_budget()?;
        Ok((p, report))
    }

    fn entry_of(rec: &WalRecord) -> Entry {
        match rec.kind {
            EntryKind::Put => Entry::put(rec.key.clone(), encode_value(rec.secondary_key.as_deref(), &rec.payload), rec.lsn),
            EntryKind::Tombstone => Entry::tombstone(rec.key.clone(), rec.lsn),
        }
    }

    pub fn id(&self) -> PartitionId {
        self.id
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn primary(&self) -> &BucketedLsm {
        &self.primary
    }

    pub fn secondary(&self) -> &SecondaryIndex {
        &self.secondary
    }

    pub fn staged(&self) -> Option<&Staged> {
        self.staged.as_ref()
    }

    pub fn last_lsn(&self) -> u64 {
        self.last_lsn
    }

    pub fn bucket_ids(&self) -> Vec<BucketId> {
        self.primary.bucket_ids()
    }

    pub fn owns_key(&self, key: &[u8]) -> bool {
        self.primary.owns_key(key)
    }

    pub fn apply_write(&mut self, op: WriteOp) -> Result<WalRecord> {
        self.apply_batch(vec![op]).pop().expect("one result per op")
    }

    /// Applies a group of writes with one log force. Each op gets its own
    /// result; ops for keys this partition does not own are rejected
    /// individually. A log failure rejects the whole group.
    pub fn apply_batch(&mut self, ops: Vec<WriteOp>) -> Vec<Result<WalRecord>> {
        let mut results: Vec<Result<WalRecord>> = Vec::with_capacity(ops.len());
        let mut records = Vec::new();
        for op in ops {
            let key = op.key().clone();
            if key.is_empty() {
                results.push(Err(Error::EmptyKey));
                continue;
            }
            let hash = hash_key(&key);
            let Some(bucket) = self.primary.bucket_for_hash(hash) else {
                results.push(Err(Error::WrongPartition { hash }));
                continue;
            };
            self.last_lsn += 1;
            let rec = match op {
                WriteOp::Put { key, payload, secondary } => WalRecord {
                    lsn: self.last_lsn,
                    kind: EntryKind::Put,
                    key,
                    payload,
                    secondary_key: secondary,
                    bucket: bucket.id(),
                },
                WriteOp::Delete { key } => WalRecord {
                    lsn: self.last_lsn,
                    kind: EntryKind::Tombstone,
                    key,
                    payload: Bytes::new(),
                    secondary_key: None,
                    bucket: bucket.id(),
                },
            };
            records.push(rec.clone());
            results.push(Ok(rec));
        }
        if records.is_empty() {
            return results;
        }
        if let Err(e) = self.wal.append_all(&records) {
            return results.into_iter().map(|r| r.and(Err(e.clone()))).collect();
        }
        for rec in &records {
            if let Err(e) = self.primary.write(Self::entry_of(rec)) {
                return results.into_iter().map(|r| r.and(Err(e.clone()))).collect();
            }
            if let (EntryKind::Put, Some(sec)) = (rec.kind, &rec.secondary_key) {
                self.secondary.insert(sec, &rec.key, rec.lsn);
            }
        }
        if let Err(e) = self.enforce_memory_budget() {
            if e.is_crash() {
                return results.into_iter().map(|r| r.and(Err(e.clone()))).collect();
            }
        }
        results
    }

    pub fn point_lookup(&self, key: &[u8]) -> Result<Option<Record>> {
        match self.primary.get(key)? {
            Some(v) => decode_record(Bytes::copy_from_slice(key), &v).map(Some),
            None => Ok(None),
        }
    }

    /// Live records with keys in `[lo, hi]`.
    pub fn range_scan(&self, lo: &[u8], hi: &[u8], ordered: bool) -> Result<Vec<Record>> {
        self.primary
            .scan(lo, hi, ordered)
            .map(|e| decode_record(e.key.clone(), &e.value))
            .collect()
    }

    /// Records whose secondary key lies in `[lo, hi]`, ordered by
    /// `(secondary key, primary key)`.
    pub fn secondary_query(&self, lo: &[u8], hi: &[u8]) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for (sec, pk) in self.secondary.scan_raw(lo, hi) {
            let rec = match self.point_lookup(&pk) {
                Ok(Some(r)) => r,
                Ok(None) | Err(Error::WrongPartition { .. }) => continue,
                Err(e) => return Err(e),
            };
            if rec.secondary.as_ref() == Some(&sec) {
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Flushes the largest memory component while the partition is over its
    /// memory budget. Each flushed bucket then gets merge and split checks.
    pub fn enforce_memory_budget(&mut self) -> Result<()> {
        loop {
            let sec = self.secondary.memory_bytes();
            let total = self.primary.memory_bytes() + sec;
            if total <= self.opts.memory_budget_bytes {
                return Ok(());
            }
            match self.primary.largest_memory_bucket() {
                Some((id, bytes)) if bytes >= sec => {
                    self.primary.flush(id)?;
                    self.after_flush(id)?;
                }
                _ => {
                    self.secondary.flush()?;
                    self.secondary.merge_until_quiescent()?;
                }
            }
        }
    }

    fn after_flush(&mut self, id: BucketId) -> Result<()> {
        self.primary.merge_until_quiescent(id)?;
        self.maybe_split(id)
    }

    fn maybe_split(&mut self, id: BucketId) -> Result<()> {
        if self.primary.splits_disabled() || !self.primary.needs_split(id) {
            return Ok(());
        }
        let (l, r) = match self.primary.split(id) {
            Ok(c) => c,
            Err(Error::SplitsDisabled) => return Ok(()),
            Err(e) => return Err(e),
        };
        for child in [l, r] {
            self.primary.merge_until_quiescent(child)?;
            self.maybe_split(child)?;
        }
        Ok(())
    }

    pub fn flush_all(&mut self) -> Result<()> {
        for id in self.primary.bucket_ids() {
            self.primary.flush(id)?;
        }
        self.secondary.flush()
    }

    /// Runs merges (and any split they make necessary) until no merge
    /// policy selects anything.
    pub fn quiesce(&mut self) -> Result<()> {
        for id in self.primary.bucket_ids() {
            if self.primary.bucket(id).is_some() {
                self.after_flush(id)?;
            }
        }
        self.secondary.merge_until_quiescent()?;
        Ok(())
    }

    pub fn flush_and_quiesce(&mut self) -> Result<()> {
        self.flush_all()?;
        self.quiesce()
    }

    /// Flushes everything, then merges every bucket and the secondary index
    /// down to one component each, regardless of policy.
    pub fn compact(&mut self) -> Result<()> {
        self.flush_all()?;
        for id in self.primary.bucket_ids() {
            self.primary.force_full_merge(id)?;
        }
        self.secondary.force_full_merge()?;
        Ok(())
    }

    pub fn split_bucket(&mut self, id: BucketId) -> Result<(BucketId, BucketId)> {
        self.primary.split(id)
    }

    pub fn disable_splits(&self) {
        self.primary.disable_splits();
    }

    pub fn enable_splits(&self) {
        self.primary.enable_splits();
    }

    /// Number of live records, by full scan.
    pub fn record_count(&self) -> usize {
        self.primary.scan_all(false).count()
    }

    /// Every live record, in key order.
    pub fn all_records(&self) -> Result<Vec<Record>> {
        self.primary
            .scan_all(true)
            .map(|e| decode_record(e.key.clone(), &e.value))
            .collect()
    }

    // ---- rebalance: source side ----

    /// First half of a rebalance snapshot: pauses merges of the bucket and
    /// moves its memory component aside for an asynchronous flush.
    pub fn snapshot_begin(&mut self, id: BucketId) -> Result<()> {
        self.primary.pause_merges(id)?;
        self.primary.begin_flush(id)?;
        Ok(())
    }

    /// Completes the asynchronous flush, flushes residual writes under the
    /// bucket latch and returns the resulting component list. Every write
    /// acknowledged before this call is in the returned components; every
    /// later one must be replicated.
    pub fn snapshot_finish(&mut self, id: BucketId) -> Result<Arc<Vec<Component>>> {
        self.primary.finish_flush(id)?;
        self.primary.flush(id)?;
        Ok(self.primary.bucket(id).ok_or(Error::UnknownBucket(id))?.components())
    }

    pub fn resume_merges(&mut self, id: BucketId) -> Result<()> {
        if self.primary.bucket(id).is_some() {
            self.primary.resume_merges(id)?;
        }
        Ok(())
    }

    /// Removes a bucket that moved away. Its secondary entries are marked
    /// lazily deleted first; both steps are idempotent.
    pub fn drop_bucket(&mut self, id: BucketId) -> Result<()> {
        self.secondary.mark_deleted(id)?;
        self.env.point("partition.after-secondary-mark")?;
        self.primary.remove_bucket(id)?;
        Ok(())
    }

    // ---- rebalance: destination side ----

    /// Starts (or continues) receiving buckets for rebalance `rid`. A staged
    /// set of another rebalance is discarded.
    pub fn stage_open(&mut self, rid: u64, incoming: &[BucketId]) -> Result<()> {
        if let Some(s) = &self.staged {
            if s.rebalance() == rid {
                return Ok(());
            }
            self.staged.take().expect("checked").discard()?;
        }
        self.staged = Some(Staged::new(self.env.clone(), &self.prefix, rid, incoming, self.opts.lsm.bloom_bits_per_key));
        Ok(())
    }

    fn staged_mut(&mut self, rid: u64) -> Result<&mut Staged> {
        match &mut self.staged {
            Some(s) if s.rebalance() == rid => Ok(s),
            _ => Err(Error::RebalanceAborted(format!("no staged buckets for rebalance {rid}"))),
        }
    }

    pub fn stage_load(&mut self, rid: u64, bucket: BucketId, entries: Vec<Entry>) -> Result<()> {
        self.staged_mut(rid)?.load(bucket, entries)
    }

    pub fn stage_scan_done(&mut self, rid: u64, bucket: BucketId) -> Result<()> {
        self.staged_mut(rid)?.finish_scan(bucket)
    }

    pub fn stage_replicate(&mut self, rid: u64, rec: &WalRecord) -> Result<()> {
        self.staged_mut(rid)?.replicate(rec)
    }

    pub fn stage_prepare(&mut self, rid: u64) -> Result<()> {
        self.staged_mut(rid)?.prepare()
    }

    /// Makes the staged buckets of `rid` visible. Installing twice, or
    /// after the staged set is gone, changes nothing.
    pub fn install_staged(&mut self, rid: u64) -> Result<Vec<BucketId>> {
        let Some(staged) = self.staged.as_ref().filter(|s| s.rebalance() == rid) else {
            return Ok(Vec::new());
        };
        if !staged.is_prepared() {
            return Err(Error::RebalanceAborted(format!("staged buckets of rebalance {rid} were never prepared")));
        }
        let mut installed = Vec::new();
        for id in staged.bucket_ids() {
            let comps = staged.bucket(id).expect("listed").components().to_vec();
            if self.primary.install_bucket(id, comps, self.last_lsn, self.last_lsn)? {
                installed.push(id);
            }
        }
        self.env.point("partition.after-install-primary")?;
        let sec: Vec<_> = staged.secondary_components().to_vec();
        self.secondary.install(&sec)?;
        self.env.point("partition.after-install-secondary")?;
        self.staged.take().expect("checked").retire()?;
        Ok(installed)
    }

    /// Discards staged data of `rid` (or of any rebalance when `None`).
    pub fn discard_staged(&mut self, rid: Option<u64>) -> Result<()> {
        if self.staged.as_ref().is_some_and(|s| rid.is_none_or(|r| r == s.rebalance())) {
            self.staged.take().expect("checked").discard()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid() -> PartitionId {
        PartitionId { node: 0, slot: 0 }
    }

    fn put(k: u32, v: &str, s: &str) -> WriteOp {
        WriteOp::Put {
            key: Bytes::copy_from_slice(&k.to_be_bytes()),
            payload: Bytes::copy_from_slice(v.as_bytes()),
            secondary: Some(Bytes::copy_from_slice(s.as_bytes())),
        }
    }

    fn key(k: u32) -> [u8; 4] {
        k.to_be_bytes()
    }

    #[test]
    fn secondary_follows_updates_and_deletes() {
        let (env, _) = Env::in_memory();
        let mut p = Partition::create(env, pid(), PartitionOptions::default(), &[BucketId::root()]).unwrap();
        p.apply_write(put(1, "v1", "s1")).unwrap();
        assert_eq!(p.secondary_query(b"s1", b"s1").unwrap().len(), 1);
        p.apply_write(put(1, "v2", "s2")).unwrap();
        assert!(p.secondary_query(b"s1", b"s1").unwrap().is_empty());
        assert_eq!(p.secondary_query(b"s2", b"s2").unwrap()[0].payload, &b"v2"[..]);
        p.apply_write(WriteOp::Delete { key: Bytes::copy_from_slice(&key(1)) }).unwrap();
        assert!(p.secondary_query(b"s0", b"s9").unwrap().is_empty());
    }

    #[test]
    fn recovery_replays_unflushed_writes() {
        let (env, mem) = Env::in_memory();
        let opts = PartitionOptions::default();
        let mut p = Partition::create(env.clone(), pid(), opts.clone(), &[BucketId::root()]).unwrap();
        for i in 0..50 {
            p.apply_write(put(i, "a", "x")).unwrap();
        }
        p.flush_all().unwrap();
        for i in 25..75 {
            p.apply_write(put(i, "b", "y")).unwrap();
        }
        env.kill();
        mem.crash();
        let (r, report) = Partition::recover(env.restart(), pid(), opts).unwrap();
        assert_eq!(report.replayed_primary, 50);
        assert_eq!(report.replayed_secondary, 50);
        assert_eq!(r.record_count(), 75);
        assert_eq!(r.point_lookup(&key(30)).unwrap().unwrap().payload, &b"b"[..]);
        assert_eq!(r.secondary_query(b"x", b"x").unwrap().len(), 25);
        assert_eq!(r.secondary_query(b"y", b"y").unwrap().len(), 50);
        assert_eq!(r.last_lsn(), 100);
    }

    #[test]
    fn memory_budget_triggers_flushes() {
        let (env, _) = Env::in_memory();
        let opts = PartitionOptions { memory_budget_bytes: 2048, ..Default::default() };
        let buckets: Vec<_> = (0..4).map(|i| BucketId::new(i, 2).unwrap()).collect();
        let mut p = Partition::create(env, pid(), opts, &buckets).unwrap();
        for i in 0..500 {
            p.apply_write(put(i, "payload", "s")).unwrap();
        }
        assert!(p.primary().memory_bytes() + p.secondary().memory_bytes() <= 2048);
        assert!(p.primary().stats().flushes.load(std::sync::atomic::Ordering::Relaxed) > 0);
        assert_eq!(p.record_count(), 500);
    }

    #[test]
    fn staged_data_invisible_until_install() {
        let (src_env, _) = Env::in_memory();
        let (dst_env, dst_mem) = Env::in_memory();
        let moving = BucketId::new(1, 1).unwrap();
        let staying = BucketId::new(0, 1).unwrap();
        let opts = PartitionOptions::default();
        let mut src = Partition::create(src_env, pid(), opts.clone(), &[staying, moving]).unwrap();
        let dst_id = PartitionId { node: 1, slot: 0 };
        let mut dst = Partition::create(dst_env.clone(), dst_id, opts.clone(), &[]).unwrap();
        for i in 0..200 {
            src.apply_write(put(i, "v1", "old")).unwrap();
        }
        let moved: Vec<u32> = (0..200).filter(|i| moving.contains_key(&key(*i))).collect();

        src.snapshot_begin(moving).unwrap();
        src.apply_write(put(moved[0], "mid", "old")).unwrap();
        let snap = src.snapshot_finish(moving).unwrap();
        let scanned: Vec<Entry> = BucketedLsm::scan_components(&snap).collect();
        assert_eq!(scanned.len(), moved.len());

        dst.stage_open(7, &[moving]).unwrap();
        dst.stage_load(7, moving, scanned).unwrap();
        dst.stage_scan_done(7, moving).unwrap();
        let rec = src.apply_write(put(moved[1], "v2", "new")).unwrap();
        dst.stage_replicate(7, &rec).unwrap();
        let rec = src.apply_write(WriteOp::Delete { key: Bytes::copy_from_slice(&key(moved[2])) }).unwrap();
        dst.stage_replicate(7, &rec).unwrap();

        assert!(matches!(dst.point_lookup(&key(moved[0])), Err(Error::WrongPartition { .. })));
        assert!(dst.secondary_query(b"a", b"z").unwrap().is_empty());
        dst.stage_prepare(7).unwrap();

        // crash after the prepared vote: staged data survives recovery
        dst_env.kill();
        dst_mem.crash();
        let (mut dst, report) = Partition::recover(dst_env.restart(), dst_id, opts).unwrap();
        assert_eq!(report.prepared, Some(7));
        assert_eq!(dst.install_staged(7).unwrap(), vec![moving]);
        assert!(dst.install_staged(7).unwrap().is_empty());
        src.drop_bucket(moving).unwrap();

        assert_eq!(dst.point_lookup(&key(moved[0])).unwrap().unwrap().payload, &b"mid"[..]);
        assert_eq!(dst.point_lookup(&key(moved[1])).unwrap().unwrap().payload, &b"v2"[..]);
        assert!(dst.point_lookup(&key(moved[2])).unwrap().is_none());
        assert_eq!(dst.record_count(), moved.len() - 1);
        assert_eq!(dst.secondary_query(b"new", b"new").unwrap().len(), 1);
        assert_eq!(dst.secondary_query(b"old", b"old").unwrap().len(), moved.len() - 2);
        assert!(src.secondary_query(b"old", b"old").unwrap().iter().all(|r| staying.contains_key(&r.key)));
        assert!(src.secondary().scan_raw(b"a", b"z").iter().all(|(_, pk)| staying.contains_key(pk)));
    }

    #[test]
    fn unprepared_staged_files_removed_on_recovery() {
        let (env, mem) = Env::in_memory();
        let opts = PartitionOptions::default();
        let b = BucketId::root();
        let mut p = Partition::create(env.clone(), pid(), opts.clone(), &[]).unwrap();
        p.stage_open(3, &[b]).unwrap();
        p.stage_load(3, b, vec![Entry::put(&b"k"[..], encode_value(None, b"v"), 1)]).unwrap();
        p.stage_scan_done(3, b).unwrap();
        assert!(!env.storage.list("n0/p0/staged/").unwrap().is_empty());
        env.kill();
        mem.crash();
        let (_, report) = Partition::recover(env.restart(), pid(), opts).unwrap();
        assert_eq!(report.prepared, None);
        assert_eq!(report.removed_files, 1);
        assert!(env.storage.list("n0/p0/staged/").unwrap().is_empty());
    }
}
