//! Buckets received during a rebalance, held invisible until commit.
//!
//! Scanned snapshot data is bulk-loaded into disk components; replicated
//! writes go to a separate memory component per bucket and are flushed in
//! front of the loaded data, so they win reconciliation. Nothing here is
//! durable until [`Staged::prepare`] writes the staged metadata file.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::secondary::composite_key;
use super::value::{decode_value, encode_value};
use super::wal::WalRecord;
use crate::directory::{hash_key, BucketId};
use crate::error::{Error, Result};
use crate::lsm::component::component_file_name;
use crate::lsm::{DiskComponent, Entry, EntryKind, MemTable};
use crate::storage::Env;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct StagedMeta {
    rebalance: u64,
    prepared: bool,
    #[serde(with = "crate::directory::bucket_map")]
    buckets: BTreeMap<BucketId, Vec<String>>,
    secondary: Vec<String>,
}

#[derive(Debug, Default)]
pub struct StagedBucket {
    loading: Vec<Entry>,
    scan_done: bool,
    replication: MemTable,
    /// Newest first; replication output precedes loaded data.
    components: Vec<Arc<DiskComponent>>,
    loaded_records: usize,
    replicated_records: usize,
}

impl StagedBucket {
    pub fn components(&self) -> &[Arc<DiskComponent>] {
        &self.components
    }

    pub fn loaded_records(&self) -> usize {
        self.loaded_records
    }

    pub fn replicated_records(&self) -> usize {
        self.replicated_records
    }
}

#[derive(Debug)]
pub struct Staged {
    env: Env,
    meta_file: String,
    dir: String,
    rebalance: u64,
    prepared: bool,
    buckets: BTreeMap<BucketId, StagedBucket>,
    secondary_memory: MemTable,
    secondary: Vec<Arc<DiskComponent>>,
    bits_per_key: usize,
    next_uid: u64,
}

impl Staged {
    pub fn meta_file(partition_prefix: &str) -> String {
        format!("{partition_prefix}/staged.meta")
    }

    pub fn dir(partition_prefix: &str) -> String {
        format!("{partition_prefix}/staged/")
    }

    pub fn new(env: Env, partition_prefix: &str, rebalance: u64, incoming: &[BucketId], bits_per_key: usize) -> Self {
        Self {
            env,
            meta_file: Self::meta_file(partition_prefix),
            dir: format!("{}r{rebalance}", Self::dir(partition_prefix)),
            rebalance,
            prepared: false,
            buckets: incoming.iter().map(|b| (*b, StagedBucket::default())).collect(),
            secondary_memory: MemTable::new(),
            secondary: Vec::new(),
            bits_per_key,
            next_uid: 0,
        }
    }

    /// Loads a prepared staged set. An unprepared or missing file yields
    /// `None`; its data files are garbage.
    pub fn open(env: Env, partition_prefix: &str, bits_per_key: usize) -> Result<Option<Self>> {
        let file = Self::meta_file(partition_prefix);
        let Some(raw) = env.storage.get(&file)? else {
            return Ok(None);
        };
        let meta: StagedMeta =
            serde_json::from_slice(&raw).map_err(|e| Error::Corrupt { file: file.clone(), reason: e.to_string() })?;
        if !meta.prepared {
            env.storage.delete(&file)?;
            return Ok(None);
        }
        let mut staged = Self::new(env.clone(), partition_prefix, meta.rebalance, &[], bits_per_key);
        staged.prepared = true;
        for (id, files) in &meta.buckets {
            let mut b = StagedBucket { scan_done: true, ..Default::default() };
            for f in files {
                b.components.push(DiskComponent::open(&env, f)?);
            }
            staged.buckets.insert(*id, b);
        }
        for f in &meta.secondary {
            staged.secondary.push(DiskComponent::open(&env, f)?);
        }
        Ok(Some(staged))
    }

    pub fn rebalance(&self) -> u64 {
        self.rebalance
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared
    }

    pub fn bucket_ids(&self) -> Vec<BucketId> {
        self.buckets.keys().copied().collect()
    }

    pub fn bucket(&self, id: BucketId) -> Option<&StagedBucket> {
        self.buckets.get(&id)
    }

    pub fn secondary_components(&self) -> &[Arc<DiskComponent>] {
        &self.secondary
    }

    pub fn scans_complete(&self) -> bool {
        self.buckets.values().all(|b| b.scan_done)
    }

    pub fn files(&self) -> BTreeSet<String> {
        self.buckets
            .values()
            .flat_map(|b| b.components.iter())
            .chain(self.secondary.iter())
            .map(|c| c.file().to_string())
            .collect()
    }

    fn bucket_mut(&mut self, id: BucketId) -> Result<&mut StagedBucket> {
        self.buckets.get_mut(&id).ok_or(Error::UnknownBucket(id))
    }

    fn write(&mut self, bucket: BucketId, mut entries: Vec<Entry>) -> Result<Arc<DiskComponent>> {
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        let uid = self.next_uid;
        self.next_uid += 1;
        let min = entries.iter().map(|e| e.seq).min().unwrap_or(0);
        let max = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        let file = component_file_name(&self.dir, bucket, min, max, uid);
        DiskComponent::write(&self.env, file, bucket, entries, self.bits_per_key)
    }

    /// Buffers scanned records of `bucket`.
    pub fn load(&mut self, bucket: BucketId, entries: Vec<Entry>) -> Result<()> {
        let b = self.bucket_mut(bucket)?;
        b.loaded_records += entries.len();
        b.loading.extend(entries);
        Ok(())
    }

    /// Writes a bucket's buffered scan data as its oldest staged component.
    pub fn finish_scan(&mut self, bucket: BucketId) -> Result<()> {
        let b = self.bucket_mut(bucket)?;
        if b.scan_done {
            return Ok(());
        }
        let entries = std::mem::take(&mut b.loading);
        if entries.is_empty() {
            self.bucket_mut(bucket)?.scan_done = true;
            return Ok(());
        }
        let secondary: Vec<Entry> = entries
            .iter()
            .filter_map(|e| {
                let (sec, _) = decode_value(&e.value)?;
                Some(Entry::put(composite_key(&sec?, &e.key), Bytes::new(), e.seq))
            })
            .collect();
        let component = self.write(bucket, entries)?;
        if !secondary.is_empty() {
            let c = self.write(BucketId::root(), secondary)?;
            self.secondary.push(c);
        }
        let b = self.bucket_mut(bucket)?;
        b.components.push(component);
        b.scan_done = true;
        Ok(())
    }

    /// Applies a write forwarded from the bucket's source partition.
    pub fn replicate(&mut self, rec: &WalRecord) -> Result<()> {
        let h = hash_key(&rec.key);
        let id = *self
            .buckets
            .keys()
            .find(|b| b.contains_hash(h))
            .ok_or(Error::WrongPartition { hash: h })?;
        let entry = match rec.kind {
            EntryKind::Put => Entry::put(
                rec.key.clone(),
                encode_value(rec.secondary_key.as_deref(), &rec.payload),
                rec.lsn,
            ),
            EntryKind::Tombstone => Entry::tombstone(rec.key.clone(), rec.lsn),
        };
        let b = self.bucket_mut(id)?;
        b.replication.insert(entry);
        b.replicated_records += 1;
        if let (EntryKind::Put, Some(sec)) = (rec.kind, &rec.secondary_key) {
            self.secondary_memory.insert(Entry::put(composite_key(sec, &rec.key), Bytes::new(), rec.lsn));
        }
        Ok(())
    }

    /// Flushes replicated writes and makes the staged set durable.
    pub fn prepare(&mut self) -> Result<()> {
        if self.prepared {
            return Ok(());
        }
        for id in self.bucket_ids() {
            let b = self.bucket_mut(id)?;
            if b.replication.is_empty() {
                continue;
            }
            let entries = std::mem::take(&mut b.replication).into_sorted();
            let c = self.write(id, entries)?;
            self.bucket_mut(id)?.components.insert(0, c);
        }
        if !self.secondary_memory.is_empty() {
            let entries = std::mem::take(&mut self.secondary_memory).into_sorted();
            let c = self.write(BucketId::root(), entries)?;
            self.secondary.insert(0, c);
        }
        let meta = StagedMeta {
            rebalance: self.rebalance,
            prepared: true,
            buckets: self
                .buckets
                .iter()
                .map(|(id, b)| (*id, b.components.iter().map(|c| c.file().to_string()).collect()))
                .collect(),
            secondary: self.secondary.iter().map(|c| c.file().to_string()).collect(),
        };
        self.env.point("staged.before-force")?;
        self.env.storage.put(&self.meta_file, &serde_json::to_vec(&meta).expect("metadata serializes"))?;
        self.prepared = true;
        Ok(())
    }

    /// Removes the staged metadata once its contents are installed.
    pub fn retire(self) -> Result<()> {
        self.env.storage.delete(&self.meta_file)
    }

    /// Throws the staged data away.
    pub fn discard(self) -> Result<()> {
        for c in self.buckets.values().flat_map(|b| b.components.iter()).chain(self.secondary.iter()) {
            c.mark_obsolete();
        }
        self.env.storage.delete(&self.meta_file)
    }
}
