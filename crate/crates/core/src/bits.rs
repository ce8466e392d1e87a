//! Packed bit strings, most-significant-bit first.
//!
//! Bit `i` lives in word `i / 64` at position `63 - i % 64`, so the byte
//! view of a `Bits` is the usual big-endian reading of the string. Unused
//! trailing bits of the last word are always zero.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

impl Bits {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    /// Takes the first `len` bits of `bytes`.
    ///
    /// Panics if `bytes` holds fewer than `len` bits.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        assert!(bytes.len() * 8 >= len, "not enough bytes for {len} bits");
        let mut words = vec![0u64; words_for(len)];
        for (i, w) in words.iter_mut().enumerate() {
            let mut buf = [0u8; 8];
            let start = i * 8;
            let end = (start + 8).min(bytes.len());
            buf[..end - start].copy_from_slice(&bytes[start..end]);
            *w = u64::from_be_bytes(buf);
        }
        let mut out = Self { words, len };
        out.clear_tail();
        out
    }

    /// All bits of `bytes`.
    pub fn from_all_bytes(bytes: &[u8]) -> Self {
        Self::from_bytes(bytes, bytes.len() * 8)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut out = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            out.set(i, b);
        }
        out
    }

    /// The low `len` bits of `value`, most significant first.
    pub fn from_u64(value: u64, len: usize) -> Self {
        assert!(len <= 64);
        let mut out = Self::zeros(len);
        if len > 0 {
            out.words[0] = value << (64 - len);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / 64] >> (63 - i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (63 - i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        let b = self.get(i);
        self.set(i, !b);
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_be_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Reads up to 64 bits starting at `start` as an unsigned integer.
    pub fn read_u64(&self, start: usize, width: usize) -> u64 {
        assert!(width <= 64 && start + width <= self.len);
        if width == 0 {
            return 0;
        }
        self.window_word(start) >> (64 - width)
    }

    /// The 64 bits starting at `start`, zero-filled past the end.
    #[inline]
    fn window_word(&self, start: usize) -> u64 {
        let w = start / 64;
        let off = start % 64;
        let hi = self.words.get(w).copied().unwrap_or(0);
        if off == 0 {
            hi
        } else {
            let lo = self.words.get(w + 1).copied().unwrap_or(0);
            (hi << off) | (lo >> (64 - off))
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Bits {
        assert!(
            start + len <= self.len,
            "slice {start}+{len} out of range {}",
            self.len
        );
        let mut out = Bits::zeros(len);
        for (i, w) in out.words.iter_mut().enumerate() {
            *w = self.window_word(start + i * 64);
        }
        out.clear_tail();
        out
    }

    /// XORs `src[start..start+self.len()]` into `self`, zero-filling past
    /// the end of `src`.
    pub(crate) fn xor_window_from(&mut self, src: &Bits, start: usize) {
        for (i, w) in self.words.iter_mut().enumerate() {
            *w ^= src.window_word(start + i * 64);
        }
        self.clear_tail();
    }

    pub fn xor_assign(&mut self, other: &Bits) {
        assert_eq!(self.len, other.len, "xor of unequal lengths");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= *b;
        }
    }

    pub fn xor(&self, other: &Bits) -> Bits {
        let mut out = self.clone();
        out.xor_assign(other);
        out
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        let i = self.len - 1;
        self.set(i, bit);
    }

    pub fn extend_from(&mut self, other: &Bits) {
        if other.is_empty() {
            return;
        }
        let off = self.len % 64;
        if off == 0 {
            self.words.extend_from_slice(&other.words);
        } else {
            let last = self.words.len() - 1;
            for (i, &w) in other.words.iter().enumerate() {
                if i == 0 {
                    self.words[last] |= w >> off;
                } else {
                    let idx = last + i;
                    self.words[idx] |= w >> off;
                }
                self.words.push(w << (64 - off));
            }
        }
        self.len += other.len;
        self.words.truncate(words_for(self.len));
        self.clear_tail();
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Bits>) -> Bits {
        let mut out = Bits::new();
        for p in parts {
            out.extend_from(p);
        }
        out
    }

    fn clear_tail(&mut self) {
        let used = self.len % 64;
        if used != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= !0u64 << (64 - used);
            }
        }
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        let bytes = self.to_bytes();
        write!(f, "Bits({}b ", self.len)?;
        for b in bytes.iter().take(SHOWN) {
            write!(f, "{b:02x}")?;
        }
        if bytes.len() > SHOWN {
            write!(f, "..")?;
        }
        write!(f, ")")
    }
}
