//! Seed derivation.
//!
//! Every random stream in a simulation is keyed by `(master seed, stream tag, index)`,
//! so clip-level work can run in any order (or in parallel) without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags keep independent uses of the same master seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Codebook = 1,
    Clip = 2,
    Channel = 3,
    Sampling = 4,
    Subset = 5,
    SeedSet = 6,
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let a = mix64(master.wrapping_add(GOLDEN));
    let b = mix64(a ^ (stream as u64).wrapping_mul(GOLDEN));
    mix64(b ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Counter-based uniform in `[0, 1)`: the same `(seed, counter)` always yields the same value.
#[inline]
pub fn counter_uniform(seed: u64, counter: u64) -> f64 {
    let bits = mix64(seed ^ mix64(counter.wrapping_add(1).wrapping_mul(GOLDEN)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
