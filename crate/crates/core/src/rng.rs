//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed derived from the user seed and a purpose tag, so
//! results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags used when deriving child seeds.
pub mod tag {
    pub const RANK_REFERENCE: u64 = 1;
    pub const DELTA_SPLITS: u64 = 2;
    pub const REPLICATION: u64 = 3;
    pub const CCA_FOLDS: u64 = 4;
    pub const DATA: u64 = 5;
    pub const CONTAMINATION: u64 = 6;
    pub const MISSING: u64 = 7;
    pub const ESTIMATOR: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `(tag, index)` of `seed`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    rng_from_seed(derive_seed(seed, tag, index))
}
