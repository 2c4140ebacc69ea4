use bytes::Bytes;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    Put,
    Tombstone,
}

/// A versioned key as stored in memory and disk components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: Bytes,
    pub value: Bytes,
    pub kind: EntryKind,
    pub seq: u64,
}

impl Entry {
    pub fn put(key: impl Into<Bytes>, value: impl Into<Bytes>, seq: u64) -> Self {
        Self { key: key.into(), value: value.into(), kind: EntryKind::Put, seq }
    }

    pub fn tombstone(key: impl Into<Bytes>, seq: u64) -> Self {
        Self { key: key.into(), value: Bytes::new(), kind: EntryKind::Tombstone, seq }
    }

    pub fn is_tombstone(&self) -> bool {
        self.kind == EntryKind::Tombstone
    }

    /// Bytes this entry occupies in a component data block.
    pub fn encoded_len(&self) -> usize {
        1 + 8 + 4 + self.key.len() + 4 + self.value.len()
    }
}
