//! 64-bit FNV-1a.

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(data: &[u8]) -> u64 {
    Fnv1a64::new().update(data).finish()
}

/// Streaming form, for payloads that arrive in chunks.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a64(u64);

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a64 {
    pub fn new() -> Self {
        Fnv1a64(OFFSET_BASIS)
    }

    pub fn update(mut self, data: &[u8]) -> Self {
        self.write(data);
        self
    }

    pub fn write(&mut self, data: &[u8]) {
        let mut h = self.0;
        for b in data {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
        self.0 = h;
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
