//! Seedable randomness shared by every stochastic stage.
//!
//! All draws come from ChaCha8 seeded through `SeedableRng::seed_from_u64`,
//! which is portable and stable across platforms. Sub-streams for
//! independent stages are derived with [`derive_seed`] so that adding draws in
//! one stage never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stage tag into a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
