//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 generator whose
//! 256-bit seed is the SHA-256 digest of (run seed, phase tag, unit id). Two
//! streams with the same key yield the same sequence regardless of thread
//! scheduling or the order in which units are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream for `(phase, unit_id)`.
    pub fn stream(&self, phase: &str, unit_id: &str) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((phase.len() as u64).to_le_bytes());
        hasher.update(phase.as_bytes());
        hasher.update(unit_id.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}
