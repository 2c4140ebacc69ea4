//! Immutable disk components and reference components.
//!
//! File layout (little endian):
//!
//! ```text
//! "LSMC" u16:version
//! data block    : entry*            entry = u8:kind u64:seq u32:klen key u32:vlen value
//! bloom block   : u32:k u64:nbits bits
//! footer        : u64:data_off u64:data_len u64:bloom_off u64:bloom_len
//!                 u64:entry_count u64:min_seq u64:max_seq u64:bucket_bits u32:bucket_depth
//!                 u32:klen min_key u32:klen max_key
//! trailer       : u32:footer_len u32:crc32(everything before the crc)
//! ```

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use bytes::{Buf, BufMut, Bytes};
use serde::{Deserialize, Serialize};

use super::bloom::BloomFilter;
use super::entry::{Entry, EntryKind};
use crate::directory::{hash_key, BucketId};
use crate::error::{Error, Result};
use crate::storage::Env;

const MAGIC: &[u8; 4] = b"LSMC";
const VERSION: u16 = 1;

/// File name encoding owner bucket and sequence range.
pub fn component_file_name(prefix: &str, bucket: BucketId, min_seq: u64, max_seq: u64, uid: u64) -> String {
    format!("{prefix}/c-{:x}-{}-{min_seq}-{max_seq}-{uid}.cmp", bucket.bits(), bucket.depth())
}

pub struct DiskComponent {
    file: String,
    bucket: BucketId,
    min_seq: u64,
    max_seq: u64,
    entries: Vec<Entry>,
    bloom: BloomFilter,
    size: u64,
    env: Env,
    obsolete: AtomicBool,
}

impl fmt::Debug for DiskComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiskComponent")
            .field("file", &self.file)
            .field("entries", &self.entries.len())
            .field("size", &self.size)
            .finish()
    }
}

fn corrupt(file: &str, reason: impl Into<String>) -> Error {
    Error::Corrupt { file: file.to_string(), reason: reason.into() }
}

impl DiskComponent {
    /// Encodes `entries` (sorted by key, unique) and forces the file.
    pub fn write(env: &Env, file: String, bucket: BucketId, entries: Vec<Entry>, bits_per_key: usize) -> Result<Arc<Self>> {
        debug_assert!(entries.windows(2).all(|w| w[0].key < w[1].key));
        let bloom = BloomFilter::build(entries.iter().map(|e| e.key.as_ref()), bits_per_key);
        let bytes = encode(&entries, &bloom, bucket);
        env.storage.put(&file, &bytes)?;
        Ok(Arc::new(Self::from_parts(env, file, bucket, entries, bloom, bytes.len() as u64)))
    }

    pub fn open(env: &Env, file: &str) -> Result<Arc<Self>> {
        let bytes = env.storage.get(file)?.ok_or_else(|| corrupt(file, "missing"))?;
        let (entries, bloom, bucket) = decode(file, &bytes)?;
        Ok(Arc::new(Self::from_parts(env, file.to_string(), bucket, entries, bloom, bytes.len() as u64)))
    }

    fn from_parts(env: &Env, file: String, bucket: BucketId, entries: Vec<Entry>, bloom: BloomFilter, size: u64) -> Self {
        let min_seq = entries.iter().map(|e| e.seq).min().unwrap_or(0);
        let max_seq = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        Self { file, bucket, min_seq, max_seq, entries, bloom, size, env: env.clone(), obsolete: AtomicBool::new(false) }
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    /// Bucket the component was written for.
    pub fn bucket(&self) -> BucketId {
        self.bucket
    }

    pub fn seq_range(&self) -> (u64, u64) {
        (self.min_seq, self.max_seq)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn may_contain(&self, key: &[u8]) -> bool {
        self.bloom.may_contain(key)
    }

    pub fn get(&self, key: &[u8]) -> Option<&Entry> {
        self.entries
            .binary_search_by(|e| e.key.as_ref().cmp(key))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Index of the first entry with key >= `key`.
    pub fn lower_bound(&self, key: &[u8]) -> usize {
        self.entries.partition_point(|e| e.key.as_ref() < key)
    }

    /// Schedules the file for deletion once the last handle is dropped.
    pub fn mark_obsolete(&self) {
        self.obsolete.store(true, Ordering::Release);
    }

    pub fn is_obsolete(&self) -> bool {
        self.obsolete.load(Ordering::Acquire)
    }
}

impl Drop for DiskComponent {
    fn drop(&mut self) {
        if self.is_obsolete() && self.env.is_live() {
            let _ = self.env.storage.delete(&self.file);
        }
    }
}

fn encode(entries: &[Entry], bloom: &BloomFilter, bucket: BucketId) -> Vec<u8> {
    let mut out = Vec::with_capacity(entries.iter().map(Entry::encoded_len).sum::<usize>() + 128);
    out.put_slice(MAGIC);
    out.put_u16_le(VERSION);
    let data_off = out.len() as u64;
    for e in entries {
        out.put_u8(match e.kind {
            EntryKind::Put => 0,
            EntryKind::Tombstone => 1,
        });
        out.put_u64_le(e.seq);
        out.put_u32_le(e.key.len() as u32);
        out.put_slice(&e.key);
        out.put_u32_le(e.value.len() as u32);
        out.put_slice(&e.value);
    }
    let data_len = out.len() as u64 - data_off;
    let bloom_off = out.len() as u64;
    bloom.encode_into(&mut out);
    let bloom_len = out.len() as u64 - bloom_off;

    let footer_start = out.len();
    out.put_u64_le(data_off);
    out.put_u64_le(data_len);
    out.put_u64_le(bloom_off);
    out.put_u64_le(bloom_len);
    out.put_u64_le(entries.len() as u64);
    out.put_u64_le(entries.iter().map(|e| e.seq).min().unwrap_or(0));
    out.put_u64_le(entries.iter().map(|e| e.seq).max().unwrap_or(0));
    out.put_u64_le(bucket.bits());
    out.put_u32_le(bucket.depth());
    let empty = Bytes::new();
    for k in [entries.first().map_or(&empty, |e| &e.key), entries.last().map_or(&empty, |e| &e.key)] {
        out.put_u32_le(k.len() as u32);
        out.put_slice(k);
    }
    let footer_len = (out.len() - footer_start) as u32;
    out.put_u32_le(footer_len);
    let crc = crc32fast::hash(&out);
    out.put_u32_le(crc);
    out
}

fn decode(file: &str, bytes: &[u8]) -> Result<(Vec<Entry>, BloomFilter, BucketId)> {
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(corrupt(file, "bad magic"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt(file, "checksum mismatch"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(corrupt(file, "unsupported version"));
    }
    let footer_len = u32::from_le_bytes(body[body.len() - 4..].try_into().unwrap()) as usize;
    let footer_start = body
        .len()
        .checked_sub(4 + footer_len)
        .ok_or_else(|| corrupt(file, "footer length"))?;
    let mut footer = &body[footer_start..body.len() - 4];
    if footer.remaining() < 76 {
        return Err(corrupt(file, "short footer"));
    }
    let data_off = footer.get_u64_le() as usize;
    let data_len = footer.get_u64_le() as usize;
    let bloom_off = footer.get_u64_le() as usize;
    let bloom_len = footer.get_u64_le() as usize;
    let count = footer.get_u64_le() as usize;
    let _min_seq = footer.get_u64_le();
    let _max_seq = footer.get_u64_le();
    let bucket = BucketId::new(footer.get_u64_le(), footer.get_u32_le()).map_err(|e| corrupt(file, e.to_string()))?;

    let data = body
        .get(data_off..data_off + data_len)
        .ok_or_else(|| corrupt(file, "data block out of range"))?;
    let bloom = body
        .get(bloom_off..bloom_off + bloom_len)
        .and_then(BloomFilter::decode)
        .ok_or_else(|| corrupt(file, "bad bloom block"))?;

    let shared = Bytes::copy_from_slice(data);
    let mut cur = data;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if cur.remaining() < 13 {
            return Err(corrupt(file, "truncated entry"));
        }
        let kind = match cur.get_u8() {
            0 => EntryKind::Put,
            1 => EntryKind::Tombstone,
            k => return Err(corrupt(file, format!("bad entry kind {k}"))),
        };
        let seq = cur.get_u64_le();
        let klen = cur.get_u32_le() as usize;
        if cur.remaining() < klen + 4 {
            return Err(corrupt(file, "truncated key"));
        }
        let kstart = data.len() - cur.remaining();
        cur.advance(klen);
        let vlen = cur.get_u32_le() as usize;
        if cur.remaining() < vlen {
            return Err(corrupt(file, "truncated value"));
        }
        let vstart = data.len() - cur.remaining();
        cur.advance(vlen);
        entries.push(Entry {
            key: shared.slice(kstart..kstart + klen),
            value: shared.slice(vstart..vstart + vlen),
            kind,
            seq,
        });
    }
    if cur.has_remaining() {
        return Err(corrupt(file, "trailing bytes in data block"));
    }
    Ok((entries, bloom, bucket))
}

/// How a component is listed in directory metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub file: String,
    /// Set for reference components: only keys in this bucket are visible.
    pub filter: Option<BucketId>,
}

/// An entry in a bucket's component list.
#[derive(Clone, Debug)]
pub enum Component {
    Disk(Arc<DiskComponent>),
    /// A zero-data alias of another bucket's component; exposes only the
    /// entries whose hash falls in `filter`.
    Reference { target: Arc<DiskComponent>, filter: BucketId },
}

impl Component {
    pub fn target(&self) -> &Arc<DiskComponent> {
        match self {
            Component::Disk(c) => c,
            Component::Reference { target, .. } => target,
        }
    }

    pub fn filter(&self) -> Option<BucketId> {
        match self {
            Component::Disk(_) => None,
            Component::Reference { filter, .. } => Some(*filter),
        }
    }

    pub fn is_reference(&self) -> bool {
        matches!(self, Component::Reference { .. })
    }

    pub fn record(&self) -> ComponentRecord {
        ComponentRecord { file: self.target().file().to_string(), filter: self.filter() }
    }

    /// Size used by the merge policy and split trigger. A reference counts
    /// for the share of its target that its filter selects.
    pub fn estimated_size(&self) -> u64 {
        match self {
            Component::Disk(c) => c.size(),
            Component::Reference { target, filter } => {
                let shift = filter.depth().saturating_sub(target.bucket().depth());
                target.size() >> shift.min(63)
            }
        }
    }

    /// A re-pointed handle that only exposes `child`.
    pub fn narrowed(&self, child: BucketId) -> Component {
        Component::Reference { target: self.target().clone(), filter: child }
    }

    pub fn visible(&self, key: &[u8]) -> bool {
        match self {
            Component::Disk(_) => true,
            Component::Reference { filter, .. } => filter.contains_hash(hash_key(key)),
        }
    }

    pub fn may_contain(&self, key: &[u8]) -> bool {
        self.target().may_contain(key)
    }

    pub fn get(&self, key: &[u8]) -> Option<&Entry> {
        if !self.visible(key) {
            return None;
        }
        self.target().get(key)
    }
}
