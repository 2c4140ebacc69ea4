//! Simulated durable storage.
//!
//! Every node owns one [`MemStorage`]. Whole-file writes through
//! [`Storage::put`] are atomic and durable when they return (write to a
//! temporary file, fsync, rename). Appends stay volatile until
//! [`Storage::sync`]; [`MemStorage::crash`] throws away everything that was
//! not synced, which is exactly what a power loss does to a real log file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};

pub trait Storage: Send + Sync + fmt::Debug {
    /// Atomically replaces `name` with `data` and makes it durable.
    fn put(&self, name: &str, data: &[u8]) -> Result<()>;
    fn get(&self, name: &str) -> Result<Option<Vec<u8>>>;
    fn append(&self, name: &str, data: &[u8]) -> Result<()>;
    fn sync(&self, name: &str) -> Result<()>;
    fn delete(&self, name: &str) -> Result<()>;
    fn list(&self, prefix: &str) -> Result<Vec<String>>;
}

#[derive(Default, Clone)]
struct FileState {
    durable: Vec<u8>,
    pending: Vec<u8>,
}

#[derive(Default)]
struct Inner {
    files: BTreeMap<String, FileState>,
    /// Remaining injected failures per file-name prefix.
    failures: Vec<(String, usize)>,
    bytes_written: u64,
}

#[derive(Default, Clone)]
pub struct MemStorage {
    inner: Arc<Mutex<Inner>>,
}

impl fmt::Debug for MemStorage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("MemStorage").field("files", &inner.files.len()).finish()
    }
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all unsynced appends.
    pub fn crash(&self) {
        let mut inner = self.inner.lock();
        for f in inner.files.values_mut() {
            f.pending.clear();
        }
        inner.failures.clear();
    }

    /// Makes the next `count` writes (put/append/sync) to files starting with
    /// `prefix` fail.
    pub fn fail_writes(&self, prefix: &str, count: usize) {
        self.inner.lock().failures.push((prefix.to_string(), count));
    }

    pub fn file_names(&self) -> BTreeSet<String> {
        self.inner.lock().files.keys().cloned().collect()
    }

    pub fn bytes_written(&self) -> u64 {
        self.inner.lock().bytes_written
    }

    fn check_failure(inner: &mut Inner, name: &str) -> Result<()> {
        if let Some(slot) = inner
            .failures
            .iter_mut()
            .find(|(p, n)| *n > 0 && name.starts_with(p.as_str()))
        {
            slot.1 -= 1;
            return Err(Error::Storage { file: name.to_string(), reason: "injected write failure".into() });
        }
        Ok(())
    }
}

impl Storage for MemStorage {
    fn put(&self, name: &str, data: &[u8]) -> Result<()> {
        let mut inner = self.inner.lock();
        Self::check_failure(&mut inner, name)?;
        inner.bytes_written += data.len() as u64;
        inner
            .files
            .insert(name.to_string(), FileState { durable: data.to_vec(), pending: Vec::new() });
        Ok(())
    }

    fn get(&self, name: &str) -> Result<Option<Vec<u8>>> {
        let inner = self.inner.lock();
        Ok(inner.files.get(name).map(|f| {
            let mut v = f.durable.clone();
            v.extend_from_slice(&f.pending);
            v
        }))
    }

    fn append(&self, name: &str, data: &[u8]) -> Result<()> {
        let mut inner = self.inner.lock();
        Self::check_failure(&mut inner, name)?;
        inner.bytes_written += data.len() as u64;
        inner.files.entry(name.to_string()).or_default().pending.extend_from_slice(data);
        Ok(())
    }

    fn sync(&self, name: &str) -> Result<()> {
        let mut inner = self.inner.lock();
        Self::check_failure(&mut inner, name)?;
        if let Some(f) = inner.files.get_mut(name) {
            let pending = std::mem::take(&mut f.pending);
            f.durable.extend_from_slice(&pending);
        }
        Ok(())
    }

    fn delete(&self, name: &str) -> Result<()> {
        self.inner.lock().files.remove(name);
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let inner = self.inner.lock();
        Ok(inner
            .files
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }
}

/// Labeled crash points. Protocol code calls [`CrashPoints::hit`] at phase
/// boundaries and around every force to disk; an armed label turns the call
/// into [`Error::Crash`].
#[derive(Default, Clone)]
pub struct CrashPoints {
    inner: Arc<Mutex<CrashState>>,
}

#[derive(Default)]
struct CrashState {
    armed: Vec<(String, usize)>,
    seen: Vec<String>,
}

impl fmt::Debug for CrashPoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CrashPoints")
    }
}

impl CrashPoints {
    pub fn new() -> Self {
        Self::default()
    }

    /// Crash on the `nth` (0-based) future hit of `label`.
    pub fn arm(&self, label: &str, nth: usize) {
        self.inner.lock().armed.push((label.to_string(), nth));
    }

    pub fn disarm(&self) {
        self.inner.lock().armed.clear();
    }

    pub fn hit(&self, label: &str) -> Result<()> {
        let mut st = self.inner.lock();
        st.seen.push(label.to_string());
        let mut fire = false;
        st.armed.retain_mut(|(l, n)| {
            if l != label {
                return true;
            }
            if *n == 0 {
                fire = true;
                false
            } else {
                *n -= 1;
                true
            }
        });
        if fire {
            Err(Error::Crash(label.to_string()))
        } else {
            Ok(())
        }
    }

    /// Labels hit so far, in order.
    pub fn seen(&self) -> Vec<String> {
        self.inner.lock().seen.clone()
    }
}

/// Storage plus crash instrumentation handed to every persistent component.
///
/// An `Env` belongs to one incarnation of its owner. After [`Env::kill`],
/// dropped components no longer delete their files: a crashed process does
/// not get to run its cleanup, and recovery garbage-collects instead.
#[derive(Clone, Debug)]
pub struct Env {
    pub storage: Arc<dyn Storage>,
    pub crash: CrashPoints,
    live: Arc<AtomicBool>,
}

impl Env {
    pub fn new(storage: Arc<dyn Storage>) -> Self {
        Self { storage, crash: CrashPoints::new(), live: Arc::new(AtomicBool::new(true)) }
    }

    pub fn in_memory() -> (Self, MemStorage) {
        let mem = MemStorage::new();
        (Self::new(Arc::new(mem.clone())), mem)
    }

    pub fn point(&self, label: &str) -> Result<()> {
        self.crash.hit(label)
    }

    pub fn is_live(&self) -> bool {
        self.live.load(Ordering::Acquire)
    }

    pub fn kill(&self) {
        self.live.store(false, Ordering::Release);
    }

    /// A fresh incarnation over the same storage and crash points.
    pub fn restart(&self) -> Self {
        Self { storage: self.storage.clone(), crash: self.crash.clone(), live: Arc::new(AtomicBool::new(true)) }
    }
}
