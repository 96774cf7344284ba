//! Seed plumbing.
//!
//! Every random draw in the crate comes from a ChaCha8 stream selected by
//! `(seed, purpose)`. Draws that must be reproducible independently of
//! evaluation order (per-context, per-trial) use [`child_seed`] to derive a
//! fresh seed from `(seed, purpose, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stream identifiers. Keeping them distinct means e.g. the permutation
/// drawn for a seed never correlates with the embedding drawn for that seed.
pub mod purpose {
    pub const PERMUTATION: u64 = 1;
    pub const EMBEDDING: u64 = 2;
    pub const SIGNATURES: u64 = 3;
    pub const GRAPH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN_CONTEXTS: u64 = 6;
    pub const VAL_CONTEXTS: u64 = 7;
    pub const TEST_CONTEXTS: u64 = 8;
    pub const TRIAL: u64 = 9;
    pub const CONTEXT: u64 = 10;
    pub const PAIRS: u64 = 11;
}

pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(purpose)).wrapping_add(index))
}
