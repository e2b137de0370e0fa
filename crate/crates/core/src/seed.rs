//! Derivation of per-stage random streams from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable hash of `(seed, stage, item)`; independent of platform and scheduling.
pub fn derive(seed: u64, stage: &str, item: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stage.len() as u64).to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(item.to_le_bytes());
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn rng(seed: u64, stage: &str, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stage, item))
}

/// Stable numeric id for a string item (file stem, demo name).
pub fn item_id(name: &str) -> u64 {
    derive(0, name, 0)
}
