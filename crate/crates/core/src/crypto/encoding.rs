//! Canonical byte encoding for anything that is hashed or authenticated.
//!
//! Integers are 8-byte big-endian. Byte strings carry a 4-byte big-endian
//! length prefix. Bit strings are an 8-byte bit length followed by the
//! packed bytes (most significant bit first). Composite values encode
//! their fields in declaration order.

use crate::bits::Bits;

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        let len = u32::try_from(v.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn bits(&mut self, v: &Bits) -> &mut Self {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(&v.to_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(u8::from(v))
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let mut e = Encoder::new();
        e.u8(3).u64(1).bytes(b"ab").bits(&Bits::from_u64(0b101, 3));
        assert_eq!(
            e.finish(),
            vec![3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 2, b'a', b'b', 0, 0, 0, 0, 0, 0, 0, 3, 0b1010_0000]
        );
    }
}
