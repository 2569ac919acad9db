//! Deterministic RNG stream derivation.
//!
//! Every consumer gets its own ChaCha stream keyed by (master seed, purpose
//! path), so adding draws in one place never perturbs another and runs are
//! bitwise reproducible regardless of worker scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream from a master seed and a purpose path.
pub fn derive(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ p.wrapping_mul(0x9e3779b97f4a7c15));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream purposes, kept in one place so draw orders stay stable.
pub mod stream {
    pub const DATA_SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EPISODE_DATA: u64 = 3;
    pub const EPISODE_MODEL: u64 = 4;
    pub const EVAL_DATA: u64 = 5;
    pub const EVAL_MODEL: u64 = 6;
    pub const SYNTH: u64 = 7;
}
