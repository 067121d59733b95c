//! Seed derivation. Every stochastic component receives its own ChaCha
//! stream derived from the master seed and a tag path, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a sequence of integer tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed.wrapping_add(GOLDEN)), |acc, &t| {
        mix(acc ^ mix(t.wrapping_add(GOLDEN)))
    })
}

pub fn rng_from(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags, kept in one place so two subsystems never share a stream.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const TIERS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const ROUND: u64 = 6;
    pub const CLIENT: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const SEARCH: u64 = 9;
    pub const FINETUNE: u64 = 10;
    pub const RANDINIT: u64 = 11;
    pub const RANDOM_SEARCH: u64 = 12;
    pub const TIER_BOUNDS: u64 = 13;
    pub const FED_EVAL: u64 = 14;
}
