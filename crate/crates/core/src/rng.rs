//! Seed derivation. Every random consumer draws from its own stream keyed by
//! `(master seed, component label, index)`, so adding a consumer never shifts
//! the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Well-known component labels.
pub mod labels {
    pub const DATA_SHUFFLE: &str = "data-shuffle";
    pub const WEIGHT_INIT: &str = "weight-init";
    pub const CODEBOOK_INIT: &str = "codebook-init";
    pub const CODEBOOK_RESEED: &str = "codebook-reseed";
    pub const ATTACK_NOISE: &str = "attack-noise";
    pub const CORRUPTION_NOISE: &str = "corruption-noise";
    pub const SYNTHETIC_DATA: &str = "synthetic-data";
    pub const RANDOM_WORDS: &str = "random-words";
    pub const ANALYSIS: &str = "analysis";
}

/// 32-byte seed for the stream `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dat-rng-v1");
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn stream(master: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

/// FNV-1a over raw bytes; used to key per-image noise streams by content.
pub fn content_hash(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
