//! Named random streams derived from a single master seed.
//!
//! Every stochastic step (initialisation, shuffling, dropout, sampling) asks
//! for its own stream by name. Streams are ChaCha8 instances sharing the
//! master key and differing in the 64-bit stream id, so drawing from one
//! stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream_id(name.as_bytes(), None));
        rng
    }

    /// Stream keyed by a name and an index, e.g. `("shuffle", epoch)`.
    pub fn indexed(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream_id(name.as_bytes(), Some(index)));
        rng
    }
}

// FNV-1a over the name, then the index bytes.
fn stream_id(name: &[u8], index: Option<u64>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    for &b in name {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    if let Some(i) = index {
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
        for b in i.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}
