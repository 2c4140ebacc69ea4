pub mod bloom;
pub mod component;
pub mod entry;
pub mod iter;
pub mod memtable;
pub mod policy;
pub mod tree;

pub use component::{Component, ComponentRecord, DiskComponent};
pub use entry::{Entry, EntryKind};
pub use memtable::MemTable;
pub use policy::MergeRecord;
pub use tree::{Bucket, BucketedLsm, FlushOutcome, LsmOptions};
