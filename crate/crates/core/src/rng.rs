//! Named random substreams derived from a single master seed.
//!
//! Every random draw in a run comes from a stream keyed by `(master seed,
//! label, iteration, slot)`. Streams never share state, so fanning work out
//! across threads cannot reorder draws, and a resumed run re-derives exactly
//! the streams an uninterrupted run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

/// Identifier of one random substream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub label: String,
    pub iteration: u64,
    pub slot: u64,
}

impl StreamId {
    pub fn new(label: impl Into<String>, iteration: u64, slot: u64) -> Self {
        Self {
            label: label.into(),
            iteration,
            slot,
        }
    }

    /// Portable 256-bit seed for this stream under `master`.
    pub fn seed(&self, master: u64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(master.to_le_bytes());
        hasher.update((self.label.len() as u64).to_le_bytes());
        hasher.update(self.label.as_bytes());
        hasher.update(self.iteration.to_le_bytes());
        hasher.update(self.slot.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        seed
    }

    pub fn rng(&self, master: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed(master))
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.label, self.iteration, self.slot)
    }
}

/// Convenience: rng for `(label, iteration, slot)` under `master`.
pub fn substream(master: u64, label: &str, iteration: u64, slot: u64) -> ChaCha8Rng {
    StreamId::new(label, iteration, slot).rng(master)
}

/// Uniform index in `0..n` drawn through a 64-bit path so results do not
/// depend on the platform's pointer width.
pub fn index<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    rng.random_range(0..n as u64) as usize
}
