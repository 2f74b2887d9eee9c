//! Seed handling. Every random stream is a ChaCha8 generator seeded from a
//! 64-bit value; sub-streams are derived with the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `index` under `master`:
/// `mix64(mix64(master) + (index + 1) · 0x9E3779B97F4A7C15)`.
#[inline]
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master).wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Two-level derivation for (stream label, index) pairs.
pub fn derive_seed2(master: u64, label: u64, index: u64) -> u64 {
    derive_seed(derive_seed(master, label), index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
