//! Seed fan-out.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a `u64`
//! derived from a parent seed and a textual tag:
//!
//! ```text
//! child = u64::from_le_bytes(SHA-256(parent.to_le_bytes() || tag)[0..8])
//! ```
//!
//! Tags are stable strings such as `"model"`, `"shuffle/epoch=3"` or
//! `"sample/<video_id>/<frame>"`, so one global seed reproduces a whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, tag: &str) -> ChaCha8Rng {
    rng_from(derive_seed(parent, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_seeds() {
        assert_ne!(derive_seed(7, "model"), derive_seed(7, "data"));
        assert_ne!(derive_seed(7, "model"), derive_seed(8, "model"));
        assert_eq!(derive_seed(7, "model"), derive_seed(7, "model"));
    }
}
