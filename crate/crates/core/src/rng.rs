//! Seed derivation and sampling utilities.
//!
//! All randomness in a run flows from a single master seed through named
//! sub-streams ("data", "noise", "init", "order"). A sub-stream is a fresh
//! ChaCha8 generator keyed by `(master, tag, index)`, so any sample, training
//! step, or initialization is reproducible in isolation — resuming a run does
//! not require replaying generator history.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Mix `(master, tag, index)` into a child seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let s = splitmix64(master ^ fnv1a(tag));
    splitmix64(s ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// A fresh generator for the named sub-stream.
pub fn stream(master: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag, index))
}

/// Uniform draw in [0, 1).
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw via Box-Muller (one value per call).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - uniform(rng); // (0, 1], keeps the log finite
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        *v = normal(rng) * scale;
    }
}

/// Uniform integer in [0, n).
pub fn below(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}
