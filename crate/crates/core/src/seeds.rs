//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha generator seeded from a `u64`
//! that is itself derived from a parent seed and a textual tag. Tags make the
//! streams independent of evaluation order, so adding a feature or a model
//! never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from `seed` and a tag. Stable across platforms and
/// releases (SHA-256 of the little-endian seed followed by the tag bytes).
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn derive_rng(seed: u64, tag: &str) -> Rng {
    rng(derive(seed, tag))
}

/// Stable hash of an arbitrary string, used for content keys.
pub fn hash_str(text: &str) -> u64 {
    derive(0, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_tag_sensitive() {
        assert_eq!(derive(7, "source"), derive(7, "source"));
        assert_ne!(derive(7, "source"), derive(7, "target"));
        assert_ne!(derive(7, "source"), derive(8, "source"));
    }
}
