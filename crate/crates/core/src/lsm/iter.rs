//! Lazy reconciling iterators over component snapshots.
//!
//! Cursors own `Arc` handles to the data they read, so a scan keeps its
//! components (and therefore their files) alive until it is dropped, even if
//! the bucket is split, merged or moved away in the meantime.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::Arc;

use bytes::Bytes;

use super::component::{Component, DiskComponent};
use super::entry::Entry;
use crate::directory::{hash_key, BucketId};

enum Source {
    Disk(Arc<DiskComponent>),
    Mem(Arc<Vec<Entry>>),
}

/// Position in one sorted run restricted to a key range and, for reference
/// components, to a bucket filter.
pub struct Cursor {
    source: Source,
    pos: usize,
    end: usize,
    filter: Option<BucketId>,
}

impl Cursor {
    pub fn over_component(c: &Component, lo: &[u8], hi: &[u8]) -> Self {
        let target = c.target().clone();
        let pos = target.lower_bound(lo);
        let end = target.entries().partition_point(|e| e.key.as_ref() <= hi);
        let mut cur = Cursor { source: Source::Disk(target), pos, end: end.max(pos), filter: c.filter() };
        cur.skip_filtered();
        cur
    }

    /// Cursor over every visible entry of a component.
    pub fn over_all(c: &Component) -> Self {
        let target = c.target().clone();
        let end = target.entries().len();
        let mut cur = Cursor { source: Source::Disk(target), pos: 0, end, filter: c.filter() };
        cur.skip_filtered();
        cur
    }

    /// Cursor over an already range-restricted, sorted memory snapshot.
    pub fn over_memory(entries: Arc<Vec<Entry>>) -> Self {
        let end = entries.len();
        Cursor { source: Source::Mem(entries), pos: 0, end, filter: None }
    }

    fn entry_at(&self, i: usize) -> &Entry {
        match &self.source {
            Source::Disk(c) => &c.entries()[i],
            Source::Mem(v) => &v[i],
        }
    }

    fn skip_filtered(&mut self) {
        if let Some(f) = self.filter {
            while self.pos < self.end && !f.contains_hash(hash_key(&self.entry_at(self.pos).key)) {
                self.pos += 1;
            }
        }
    }

    pub fn peek(&self) -> Option<&Entry> {
        (self.pos < self.end).then(|| self.entry_at(self.pos))
    }

    pub fn advance(&mut self) {
        self.pos += 1;
        self.skip_filtered();
    }
}

#[derive(PartialEq, Eq)]
struct HeapKey {
    key: Bytes,
    /// Lower is newer.
    rank: usize,
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key).then(self.rank.cmp(&other.rank))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Merges cursors given newest first, yielding for each key the entry from
/// the newest cursor that has it. Tombstones are yielded; callers decide.
pub struct ReconcileIter {
    cursors: Vec<Cursor>,
    heap: BinaryHeap<Reverse<HeapKey>>,
}

impl ReconcileIter {
    pub fn new(cursors: Vec<Cursor>) -> Self {
        let mut heap = BinaryHeap::with_capacity(cursors.len());
        for (rank, c) in cursors.iter().enumerate() {
            if let Some(e) = c.peek() {
                heap.push(Reverse(HeapKey { key: e.key.clone(), rank }));
            }
        }
        Self { cursors, heap }
    }

    fn bump(&mut self, rank: usize) {
        let c = &mut self.cursors[rank];
        c.advance();
        if let Some(e) = c.peek() {
            self.heap.push(Reverse(HeapKey { key: e.key.clone(), rank }));
        }
    }
}

impl Iterator for ReconcileIter {
    type Item = Entry;

    fn next(&mut self) -> Option<Entry> {
        let Reverse(top) = self.heap.pop()?;
        let winner = self.cursors[top.rank].peek().cloned().expect("heap entry has data");
        self.bump(top.rank);
        while let Some(Reverse(next)) = self.heap.peek() {
            if next.key != top.key {
                break;
            }
            let rank = next.rank;
            self.heap.pop();
            self.bump(rank);
        }
        Some(winner)
    }
}

/// Merges streams whose key sets are disjoint into one key-ordered stream.
pub struct OrderedMerge<I: Iterator<Item = Entry>> {
    streams: Vec<std::iter::Peekable<I>>,
    heap: BinaryHeap<Reverse<HeapKey>>,
}

impl<I: Iterator<Item = Entry>> OrderedMerge<I> {
    pub fn new(streams: impl IntoIterator<Item = I>) -> Self {
        let mut streams: Vec<_> = streams.into_iter().map(Iterator::peekable).collect();
        let mut heap = BinaryHeap::new();
        for (rank, s) in streams.iter_mut().enumerate() {
            if let Some(e) = s.peek() {
                heap.push(Reverse(HeapKey { key: e.key.clone(), rank }));
            }
        }
        Self { streams, heap }
    }
}

impl<I: Iterator<Item = Entry>> Iterator for OrderedMerge<I> {
    type Item = Entry;

    fn next(&mut self) -> Option<Entry> {
        let Reverse(top) = self.heap.pop()?;
        let s = &mut self.streams[top.rank];
        let e = s.next()?;
        if let Some(n) = s.peek() {
            self.heap.push(Reverse(HeapKey { key: n.key.clone(), rank: top.rank }));
        }
        Some(e)
    }
}
