//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a `ChaCha8Rng` seeded through
//! [`subseed`], so any pipeline stage can be reproduced in isolation from
//! the run seed plus a stream tag.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the independent RNG streams of a run.
pub mod stream {
    pub const SCENE: u64 = 0x01;
    pub const VIDEO: u64 = 0x02;
    pub const FIELD_INIT: u64 = 0x03;
    pub const PROJECTION: u64 = 0x04;
    pub const STEP: u64 = 0x05;
    pub const CODEBOOK: u64 = 0x06;
    pub const KMEANS: u64 = 0x07;
}

/// Mix a base seed with stream parts into a new 64-bit seed.
///
/// splitmix64-style finalizer applied over the parts; collision-free enough
/// for seeding purposes and stable across platforms.
pub fn subseed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        state = mix(state);
    }
    mix(state)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The crate-standard RNG for a derived seed.
pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, parts))
}
