//! FNV-1a content fingerprints for configs and seeded hashing. Not
//! cryptographic; used for run identity checks and deterministic noise.

pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Hex fingerprint of a byte string.
pub fn fingerprint_hex(bytes: &[u8]) -> String {
    let mut h = Fnv1a::new();
    h.write(bytes);
    format!("{:016x}", h.finish())
}
