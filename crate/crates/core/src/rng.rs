//! Deterministic, schedule-independent random streams.
//!
//! Every stochastic site in the crate derives its own generator from a
//! `(seed, stream-key)` tuple, so results do not depend on evaluation
//! order, thread count, or how many draws other sites consumed. The key
//! tuple is hashed into a 256-bit seed for a counter-based ChaCha stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Returns an independent generator for the given seed and stream key.
///
/// Distinct keys yield statistically independent streams; identical keys
/// always reproduce the same stream.
pub fn stream_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    for k in key {
        hasher.update(k.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed_bytes)
}
