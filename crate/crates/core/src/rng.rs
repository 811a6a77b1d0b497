//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by the run seed and
//! a label (phase, dataset, image id), so results do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent stream for `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[&str]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    StreamRng::from_seed(key)
}

/// Per-image stream for one phase of a run.
pub fn image_stream(seed: u64, phase: &str, dataset: usize, image_id: &str) -> StreamRng {
    stream(seed, &[phase, &dataset.to_string(), image_id])
}
