//! Seeded, platform-stable randomness.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a 64-bit
//! value. Sub-streams (per sequence, per step, per trial) derive their seed
//! from `(parent seed, index)` through SplitMix64 so results do not depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child stream of `seed`, tagged by `stream` so that
/// unrelated uses of the same index do not collide.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stream) ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, stream: u64, index: u64) -> Rng {
    rng_from_seed(derive_seed(seed, stream, index))
}

pub(crate) mod streams {
    pub const MASKING: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SEARCH: u64 = 6;
    pub const HEAD_INIT: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn child_streams_are_reproducible_and_distinct() {
        let a: u64 = child_rng(42, 1, 0).random();
        let b: u64 = child_rng(42, 1, 0).random();
        let c: u64 = child_rng(42, 1, 1).random();
        let d: u64 = child_rng(42, 2, 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
