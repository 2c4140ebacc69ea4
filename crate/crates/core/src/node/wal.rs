//! Per-partition write-ahead log.
//!
//! Each record is framed as `len: u32 | crc32: u32 | body`. A torn or
//! corrupt tail (what an unsynced append looks like after a crash) ends
//! replay; everything before it is intact.

use bytes::{Buf, BufMut, Bytes};

use crate::directory::BucketId;
use crate::error::{Error, Result};
use crate::lsm::EntryKind;
use crate::storage::Env;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalRecord {
    pub lsn: u64,
    pub kind: EntryKind,
    pub key: Bytes,
    pub payload: Bytes,
    pub secondary_key: Option<Bytes>,
    pub bucket: BucketId,
}

impl WalRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(48 + self.key.len() + self.payload.len());
        body.put_u64_le(self.lsn);
        body.put_u8(match self.kind {
            EntryKind::Put => 0,
            EntryKind::Tombstone => 1,
        });
        body.put_u64_le(self.bucket.bits());
        body.put_u32_le(self.bucket.depth());
        put_bytes(&mut body, &self.key);
        put_bytes(&mut body, &self.payload);
        match &self.secondary_key {
            Some(s) => {
                body.put_u8(1);
                put_bytes(&mut body, s);
            }
            None => body.put_u8(0),
        }
        let mut out = Vec::with_capacity(body.len() + 8);
        out.put_u32_le(body.len() as u32);
        out.put_u32_le(crc32fast::hash(&body));
        out.extend_from_slice(&body);
        out
    }

    fn decode_body(mut b: &[u8]) -> Option<Self> {
        if b.remaining() < 21 {
            return None;
        }
        let lsn = b.get_u64_le();
        let kind = match b.get_u8() {
            0 => EntryKind::Put,
            1 => EntryKind::Tombstone,
            _ => return None,
        };
        let bits = b.get_u64_le();
        let depth = b.get_u32_le();
        let bucket = BucketId::new(bits, depth).ok()?;
        let key = get_bytes(&mut b)?;
        let payload = get_bytes(&mut b)?;
        if b.remaining() < 1 {
            return None;
        }
        let secondary_key = match b.get_u8() {
            0 => None,
            1 => Some(get_bytes(&mut b)?),
            _ => return None,
        };
        b.is_empty().then_some(Self { lsn, kind, key, payload, secondary_key, bucket })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.put_u32_le(b.len() as u32);
    out.extend_from_slice(b);
}

fn get_bytes(b: &mut &[u8]) -> Option<Bytes> {
    if b.remaining() < 4 {
        return None;
    }
    let n = b.get_u32_le() as usize;
    if b.remaining() < n {
        return None;
    }
    let v = Bytes::copy_from_slice(&b[..n]);
    b.advance(n);
    Some(v)
}

/// Decodes a log image, stopping at the first torn or corrupt frame.
pub fn decode_log(mut data: &[u8]) -> Vec<WalRecord> {
    let mut out = Vec::new();
    while data.len() >= 8 {
        let len = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[4..8].try_into().unwrap());
        let Some(body) = data.get(8..8 + len) else { break };
        if crc32fast::hash(body) != crc {
            break;
        }
        let Some(rec) = WalRecord::decode_body(body) else { break };
        out.push(rec);
        data = &data[8 + len..];
    }
    out
}

#[derive(Debug)]
pub struct Wal {
    env: Env,
    file: String,
}

impl Wal {
    pub fn new(env: Env, prefix: &str) -> Self {
        Self { env, file: format!("{prefix}/wal") }
    }

    /// Appends and forces one record.
    pub fn append(&self, rec: &WalRecord) -> Result<()> {
        self.append_all(std::slice::from_ref(rec))
    }

    /// Appends a group of records and forces them with a single sync.
    pub fn append_all(&self, recs: &[WalRecord]) -> Result<()> {
        let fail = |e: Error| if e.is_crash() { e } else { Error::WalAppend(e.to_string()) };
        for r in recs {
            self.env.storage.append(&self.file, &r.encode()).map_err(fail)?;
        }
        self.env.point("wal.before-sync")?;
        self.env.storage.sync(&self.file).map_err(fail)
    }

    pub fn read_all(&self) -> Result<Vec<WalRecord>> {
        Ok(self.env.storage.get(&self.file)?.map(|d| decode_log(&d)).unwrap_or_default())
    }
}
