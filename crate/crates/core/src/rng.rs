//! Deterministic RNG streams keyed by work-item identity.
//!
//! Streams are derived by hashing a seed together with the identifying
//! fields of a work item, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Builder for a stream key; each part is length-prefixed before hashing.
#[derive(Clone)]
pub struct StreamKey {
    hasher: Sha256,
}

impl StreamKey {
    pub fn new(domain: &str, seed: u64) -> Self {
        let mut key = StreamKey {
            hasher: Sha256::new(),
        };
        key = key.with_str(domain);
        key.hasher.update(seed.to_le_bytes());
        key
    }

    pub fn with_str(mut self, part: &str) -> Self {
        self.hasher.update((part.len() as u64).to_le_bytes());
        self.hasher.update(part.as_bytes());
        self
    }

    pub fn with_u64(mut self, part: u64) -> Self {
        self.hasher.update(8u64.to_le_bytes());
        self.hasher.update(part.to_le_bytes());
        self
    }

    /// `-0.0` and `0.0` map to the same stream.
    pub fn with_f64(self, part: f64) -> Self {
        let bits = if part == 0.0 { 0 } else { part.to_bits() };
        self.with_u64(bits)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.hasher.finalize().into())
    }
}
