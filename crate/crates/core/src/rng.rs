//! Named random substreams derived from one experiment seed.
//!
//! Every consumer (data generation, initialization, per-client shuffling,
//! augmentation noise) gets its own generator keyed by a name and a few
//! indices, so adding draws to one consumer never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for `(seed, name, indices)`.
pub fn substream(seed: u64, name: &str, indices: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
