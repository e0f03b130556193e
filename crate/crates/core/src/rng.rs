//! Seeded randomness. Every random draw in the crate goes through a
//! `ChaCha8Rng` keyed by an explicit `(seed, stream)` pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::grid::LatentGrid;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// 64-bit digest of a byte string, stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_latent(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LatentGrid {
    LatentGrid::from_fn(h, w, c, |_| standard_normal(rng))
}
