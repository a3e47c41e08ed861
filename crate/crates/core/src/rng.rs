//! Reproducible random streams.
//!
//! Every particle slot owns its own ChaCha8 stream, selected by
//! `(master seed, slot index)` through ChaCha's 64-bit stream id. A slot's
//! draws therefore depend only on the seed, the slot, and how many draws the
//! slot made before, never on how work is split across threads. The
//! resampling step reads from a reserved stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream id reserved for resampling draws.
pub const RESAMPLING_STREAM: u64 = u64::MAX;

pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn particle_streams(seed: u64, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|i| stream(seed, i)).collect()
}

/// Derives a child seed from a master seed and a path of labels, e.g.
/// `(method, sweep index, replicate)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Stable 64-bit tag for a text label.
pub fn label_tag(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
