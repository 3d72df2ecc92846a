//! Deterministic seed derivation.
//!
//! Every random stream in an experiment is addressed by a path of integers
//! (root seed, purpose tag, task index, round index, ...). The path is hashed
//! with a SplitMix64 cascade so that streams never depend on how many draws
//! another consumer made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const TASK: u64 = 1;
    pub const ARMS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BASIS: u64 = 4;
    pub const DATA: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const MOMENTS: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a root seed and a path of indices into a single 64-bit seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// A generator for the stream addressed by `path` under `root`.
pub fn stream(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, path))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
