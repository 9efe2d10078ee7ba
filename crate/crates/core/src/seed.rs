//! Stable seed derivation. Every random draw in the crate goes through a
//! ChaCha8 stream seeded from a SHA-256 digest of its logical coordinates,
//! so results do not depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a base seed, a domain tag and an index.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// First eight bytes of SHA-256(text), little-endian.
pub fn hash_text(text: &str) -> u64 {
    let out = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
