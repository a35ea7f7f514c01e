//! Named, reproducible RNG streams.
//!
//! Every random decision in the pipeline draws from a [`ChaCha8Rng`] whose seed
//! is derived from the global seed plus a stage name and index. The derivation
//! is `splitmix64(global ^ fnv1a(stage) ^ splitmix64(index))`, so streams are
//! independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stage: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a(stage.as_bytes()) ^ splitmix64(index))
}

pub fn stream(seed: u64, stage: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stage, index))
}

/// Stream keyed by a string (e.g. a sample id) rather than an integer index.
pub fn keyed_stream(seed: u64, stage: &str, key: &str, index: u64) -> StreamRng {
    let k = fnv1a(key.as_bytes());
    StreamRng::seed_from_u64(derive_seed(seed ^ splitmix64(k), stage, index))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
