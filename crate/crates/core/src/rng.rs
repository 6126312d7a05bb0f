//! Keyed random streams.
//!
//! Every stochastic draw in a run is taken from a stream keyed by the global
//! seed plus a path such as `(SAMPLING, step, sample, rollout)`, so results do
//! not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const INIT: u64 = 1;
pub const BATCH: u64 = 2;
pub const SAMPLING: u64 = 3;
pub const NOISE: u64 = 4;
pub const EVAL: u64 = 5;
pub const DATA: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into one 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}
