//! Seed derivation. Every stochastic component draws from a ChaCha stream whose
//! seed is the first eight bytes of `SHA-256(label || master_le_bytes)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(master.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, label: &str) -> Rng {
    rng(derive_seed(master, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive_seed(42, "corpus"), derive_seed(42, "train"));
        assert_ne!(derive_seed(42, "corpus"), derive_seed(43, "corpus"));
        assert_eq!(derive_seed(42, "corpus"), derive_seed(42, "corpus"));
    }
}
