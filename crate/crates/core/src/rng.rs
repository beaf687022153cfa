//! Seeded randomness. Every stage draws from a named substream of the single
//! pipeline seed so that stages can be re-run independently without
//! perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(seed, name)`. The same pair always
/// yields the same stream regardless of platform.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
