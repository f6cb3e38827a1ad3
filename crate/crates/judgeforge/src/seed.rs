//! Seed derivation for reproducible sampling.
//!
//! One global seed drives the whole pipeline. Each stage hashes
//! `(global_seed, stage_name)` into a stage seed, and each record hashes
//! `(stage_seed, record_id)` into its own RNG stream. Record-level draws
//! are therefore independent of stream order and of parallel scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a stage-level seed from the global seed and a stage name.
pub fn stage_seed(global_seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derive a record-level seed from a stage seed and the record id.
pub fn record_seed(stage_seed: u64, record_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(stage_seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(record_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A cross-platform, reproducible RNG for the given seed.
pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
