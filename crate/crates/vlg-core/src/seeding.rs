//! Named, reproducible random streams.
//!
//! Every stochastic component derives its own stream from the run seed and
//! a short tag, so adding a consumer never perturbs the draws of another.
//! The derivation is a fixed FNV-1a/SplitMix combination and is part of
//! the on-disk reproducibility contract: identical seeds must reproduce
//! identical artifacts across builds and platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the sub-stream `tag` of the run seed `root`.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a64(tag.as_bytes()))
}

/// Seed for the `index`-th element of the sub-stream `tag` (one stream per
/// sample, per epoch, per parameter tensor, ...).
pub fn derive_seed_indexed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, tag) ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
