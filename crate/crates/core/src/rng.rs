//! Counter-based seed derivation.
//!
//! Every random stream in the crate is derived from a root seed plus a
//! stream label, so results do not depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent generator for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Same as [`stream`] but keyed by a numeric index.
pub fn indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{label}#{index}"))
}
