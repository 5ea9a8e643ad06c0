//! Named sub-seeds derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

/// Derives a stable sub-seed from `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_from(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, label: &str, index: u64) -> SeededRng {
    rng_from(derive_seed(master, label, index))
}
