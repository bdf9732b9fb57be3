//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one root seed and a path of
//! integer tags with a SplitMix64 mixing chain, so the stream for, say,
//! `(root, EPOCH, 17)` never depends on how much randomness other stages used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NETWORK_INIT: u64 = 1;
pub const PRETRAIN: u64 = 2;
pub const INIT_SET: u64 = 3;
pub const EPOCH: u64 = 4;
pub const VERIFY: u64 = 5;
pub const EVAL: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &tag| splitmix64(acc.rotate_left(17) ^ tag))
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
