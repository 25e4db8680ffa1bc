//! Deterministic seed derivation and sampling helpers.
//!
//! All randomness in a run flows from a single top-level seed; sub-seeds are
//! derived by hashing (seed, purpose string) so adding a new consumer never
//! shifts the streams of existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derive a sub-seed from a base seed and a purpose label.
///
/// FNV-1a over the purpose bytes mixed with the base, followed by a
/// splitmix64 finalizer. Stable across platforms and releases.
pub fn seed_for(base: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.rotate_left(17);
    for &b in purpose.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG seeded for one purpose under a base seed.
pub fn rng_for(base: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_for(base, purpose))
}

/// Standard normal sample via Box-Muller; deterministic given the RNG state.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
