//! Deterministic random streams.
//!
//! Every unit of parallel work (a task's rollout group, a TTS trace, a
//! tabular init row) draws from its own ChaCha stream keyed by the run seed and
//! a list of integer tags, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream tags that separate the different consumers of one run seed.
pub mod tag {
    pub const BATCH: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const RECYCLE: u64 = 3;
    pub const RECYCLED_ROLLOUT: u64 = 4;
    pub const SOLVE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TABULAR_ROW: u64 = 7;
}

pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for t in tags {
        hasher.update(t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Platform-independent 64-bit digest of a byte string.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
