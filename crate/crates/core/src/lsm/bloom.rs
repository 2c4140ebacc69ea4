use bytes::{Buf, BufMut};
use twox_hash::XxHash64;

// Independent of the placement hash: keys of one bucket share low hash bits.
const BLOOM_SEED: u64 = 0x5bd1_e995_b10f_f11e;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BloomFilter {
    bits: Vec<u8>,
    nbits: u64,
    k: u32,
}

impl BloomFilter {
    pub fn build<'a>(keys: impl ExactSizeIterator<Item = &'a [u8]>, bits_per_key: usize) -> Self {
        let n = keys.len().max(1);
        let nbits = ((n * bits_per_key.max(1)) as u64).max(64);
        let k = ((bits_per_key as f64 * std::f64::consts::LN_2).round() as u32).clamp(1, 30);
        let mut bits = vec![0u8; nbits.div_ceil(8) as usize];
        for key in keys {
            for pos in Self::positions(key, k, nbits) {
                bits[(pos / 8) as usize] |= 1 << (pos % 8);
            }
        }
        Self { bits, nbits, k }
    }

    fn positions(key: &[u8], k: u32, nbits: u64) -> impl Iterator<Item = u64> {
        let h = XxHash64::oneshot(BLOOM_SEED, key);
        let delta = h.rotate_left(31) | 1;
        (0..k as u64).map(move |i| h.wrapping_add(i.wrapping_mul(delta)) % nbits)
    }

    pub fn may_contain(&self, key: &[u8]) -> bool {
        Self::positions(key, self.k, self.nbits).all(|pos| self.bits[(pos / 8) as usize] & (1 << (pos % 8)) != 0)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.put_u32_le(self.k);
        out.put_u64_le(self.nbits);
        out.put_slice(&self.bits);
    }

    pub fn decode(mut buf: &[u8]) -> Option<Self> {
        if buf.remaining() < 12 {
            return None;
        }
        let k = buf.get_u32_le();
        let nbits = buf.get_u64_le();
        if k == 0 || nbits == 0 || buf.remaining() as u64 != nbits.div_ceil(8) {
            return None;
        }
        Some(Self { bits: buf.to_vec(), nbits, k })
    }
}
