use std::collections::BTreeMap;
use std::ops::Bound;

use bytes::Bytes;

use super::entry::Entry;

/// Mutable in-memory write buffer. Holds at most one entry per key; a
/// newer write replaces the older one in place.
#[derive(Clone, Debug, Default)]
pub struct MemTable {
    map: BTreeMap<Bytes, Entry>,
    bytes: usize,
    max_seq: u64,
}

impl MemTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: Entry) {
        self.bytes += entry.encoded_len();
        self.max_seq = self.max_seq.max(entry.seq);
        if let Some(old) = self.map.insert(entry.key.clone(), entry) {
            self.bytes -= old.encoded_len();
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&Entry> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn max_seq(&self) -> u64 {
        self.max_seq
    }

    pub fn range(&self, lo: &[u8], hi: &[u8]) -> impl Iterator<Item = &Entry> {
        self.map
            .range::<[u8], _>((Bound::Included(lo), Bound::Included(hi)))
            .map(|(_, e)| e)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.map.values()
    }

    pub fn into_sorted(self) -> Vec<Entry> {
        self.map.into_values().collect()
    }

    /// Folds an older table underneath this one; entries already present
    /// here win.
    pub fn absorb_older(&mut self, older: MemTable) {
        for (k, e) in older.map {
            if !self.map.contains_key(&k) {
                self.insert(e);
            }
        }
    }
}
