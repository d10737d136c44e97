//! Seed derivation for independent, order-free random streams.
//!
//! Every replicate (bootstrap draw, mixing replicate, simulated dataset) gets
//! its own generator seeded from `(master seed, purpose tag, index)`, so
//! results do not depend on scheduling or on how many replicates run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_BOOTSTRAP: u64 = 0x6f6f_7473;
pub const TAG_MIXING: u64 = 0x6d69_7869;
pub const TAG_SIMULATION: u64 = 0x7369_6d75;
pub const TAG_AUGMENT: u64 = 0x6175_676d;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
