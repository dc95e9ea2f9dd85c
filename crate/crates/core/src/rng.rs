//! Seed derivation.
//!
//! Every stochastic component receives its own 64-bit sub-seed derived from a
//! parent seed and a stream index through the SplitMix64 finalizer:
//!
//! ```text
//! z = parent ^ (index + 1) * 0x9E37_79B9_7F4A_7C15
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! z ^ (z >> 31)
//! ```
//!
//! The mixed value seeds a ChaCha8 stream, so sub-streams for distinct indices
//! are independent for all practical purposes and fully reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the sub-seed for stream `index` of `parent`.
pub fn sub_seed(parent: u64, index: u64) -> u64 {
    mix64(parent ^ index.wrapping_add(1).wrapping_mul(GOLDEN))
}

/// Sub-seed along a path of stream indices, e.g. `[replication, day]`.
pub fn sub_seed_path(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(parent, |s, &i| sub_seed(s, i))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
