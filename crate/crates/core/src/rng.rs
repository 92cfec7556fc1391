//! Seed plumbing: one root seed fans out into named substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent seed for `name` from `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(root: u64, name: &str) -> Rng {
    seeded(substream(root, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_by_name_and_root() {
        assert_ne!(substream(1, "train"), substream(1, "sample"));
        assert_ne!(substream(1, "train"), substream(2, "train"));
        assert_eq!(substream(7, "mask"), substream(7, "mask"));
    }
}
