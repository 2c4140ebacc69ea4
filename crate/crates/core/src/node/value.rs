//! Primary-index value layout: `has_sec: u8 | [sec_len: u32 | sec] | payload`.
//! Keeping the secondary key next to the payload lets secondary queries
//! validate a hit with one primary lookup.

use bytes::{BufMut, Bytes};

pub fn encode_value(secondary: Option<&[u8]>, payload: &[u8]) -> Bytes {
    let mut out = Vec::with_capacity(payload.len() + secondary.map_or(1, |s| s.len() + 5));
    match secondary {
        Some(s) => {
            out.put_u8(1);
            out.put_u32_le(s.len() as u32);
            out.extend_from_slice(s);
        }
        None => out.put_u8(0),
    }
    out.extend_from_slice(payload);
    out.into()
}

pub fn decode_value(value: &Bytes) -> Option<(Option<Bytes>, Bytes)> {
    match *value.first()? {
        0 => Some((None, value.slice(1..))),
        1 => {
            let len = u32::from_le_bytes(value.get(1..5)?.try_into().ok()?) as usize;
            let end = 5usize.checked_add(len)?;
            if value.len() < end {
                return None;
            }
            Some((Some(value.slice(5..end)), value.slice(end..)))
        }
        _ => None,
    }
}
