//! Seeded random streams.
//!
//! Every consumer derives its generator from a master seed plus a stream id,
//! so independent draws never share state and reruns are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the crate. Adding a consumer means adding an id,
/// never reusing one.
pub mod streams {
    pub const STRUCTURE: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const DECODER_INIT: u64 = 4;
    pub const PROJECTIONS: u64 = 5;
    pub const MODE_CHOICE: u64 = 6;
    pub const RETUNE_INIT: u64 = 7;
    pub const MI_ORACLE: u64 = 8;
    pub const PAIR_SAMPLING: u64 = 9;
    pub const SWEEP: u64 = 10;
}

/// Counter-based generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed; used when one seed must fan out to many units
/// (sweep configurations, per-draw sampling).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
