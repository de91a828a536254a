//! Deterministic, label-addressed random streams.
//!
//! Every random decision (weight init, per-epoch shuffling) draws from a
//! stream derived from the run seed and a string label, so adding or removing
//! one consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Stable across platforms and crate versions, which the
/// checkpoint reproducibility guarantee depends on.
fn fnv1a(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent random stream for `label` from the base seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed, label))
}
