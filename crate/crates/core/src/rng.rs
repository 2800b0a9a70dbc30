//! Seeded random streams.
//!
//! Every stochastic component (initialization, batch order, dropout masks,
//! noise, shuffles) draws from its own ChaCha8 stream derived from a user seed
//! and a stream tag, so runs are reproducible and independent of execution
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    seeded(derive_seed(seed, stream))
}

/// Named stream tags used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH_ORDER: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const QUANTILE_NOISE: u64 = 5;
    pub const PERMUTATION: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const SYNTH_X: u64 = 8;
    pub const SYNTH_TREES: u64 = 9;
    pub const SYNTH_MLP: u64 = 10;
}
