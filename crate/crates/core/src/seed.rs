//! Seed derivation. All randomness in the toolkit flows from one root seed
//! through named sub-seeds, so independent stages never share RNG streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a named sub-seed from a root seed. Stable across platforms.
pub fn sub_seed(root: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seeded RNG for a named purpose.
pub fn rng_for(root: u64, purpose: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(sub_seed(root, purpose))
}
