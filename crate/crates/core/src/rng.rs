//! Seedable random streams for synthetic data.
//!
//! All simulation randomness flows through xoshiro256++ seeded via SplitMix64,
//! so a corpus can be regenerated bit-for-bit from `(seed, scene index)` in any
//! language that implements the two published algorithms.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Identifier written next to every generated corpus.
pub const RNG_ALGORITHM: &str = "xoshiro256pp-splitmix64";

pub type SimRng = Xoshiro256PlusPlus;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for item `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}
