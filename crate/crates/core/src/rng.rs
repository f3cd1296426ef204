//! Seed derivation. Every component draws from its own ChaCha stream keyed
//! by the root seed and a path of tags, so adding a consumer never shifts
//! the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

/// Stable numeric tags for the components that consume randomness.
pub mod tag {
    pub const LATENTS: u64 = 1;
    pub const MIXING: u64 = 2;
    pub const ENCODER: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const TRAJECTORY: u64 = 5;
    pub const CELLS: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const ATTRIBUTION: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const BOOTSTRAP: u64 = 10;
    pub const SUBSAMPLE: u64 = 11;
}
