//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! `(base seed, stream tag, index)` triple, so results never depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags give statistically independent streams from
/// the same base seed.
pub mod stream {
    pub const NET_INIT: u64 = 1;
    pub const DQN: u64 = 2;
    pub const TRAIN_EVAL: u64 = 3;
    pub const COLLECT: u64 = 4;
    pub const MASK_INIT: u64 = 5;
    pub const MASK_SHUFFLE: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into a new 64-bit seed.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
