//! Deterministic randomness.
//!
//! Two regimes:
//! * counter-keyed normals — a splitmix64 hash of `(seed, tag, indices...)`
//!   feeds the standard-normal quantile function, so hierarchical noise
//!   values are reproducible independent of traversal order or thread count;
//! * keyed bulk streams — a ChaCha generator per `(seed, tag, indices...)`
//!   for full-grid draws where per-value hashing would dominate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use std::sync::OnceLock;

/// Domain-separation tags for the noise hierarchies.
pub mod tag {
    pub const DGFF: u64 = 0x01;
    pub const PSI: u64 = 0x02;
    pub const IBRW: u64 = 0x03;
    pub const MIBRW: u64 = 0x04;
    pub const COUPLING: u64 = 0x05;
    pub const REPLICATE: u64 = 0x06;
    pub const PAIR_SUBSAMPLE: u64 = 0x07;
    pub const PROFILE: u64 = 0x08;
    pub const WALK: u64 = 0x09;
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a key path into a single 64-bit value.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3; // golden-ratio-free fixed offset
    for &p in parts {
        h = splitmix(h ^ p);
        h = splitmix(h);
    }
    h
}

/// Uniform in (0,1) from a key: 53 mantissa bits, offset half a step so the
/// endpoints are never hit.
pub fn uniform_from_key(key: u64) -> f64 {
    ((key >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

fn std_normal() -> &'static Normal {
    static N: OnceLock<Normal> = OnceLock::new();
    N.get_or_init(|| Normal::new(0.0, 1.0).unwrap())
}

/// Standard normal value deterministically attached to a key.
pub fn normal_from_key(key: u64) -> f64 {
    std_normal().inverse_cdf(uniform_from_key(key))
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Bulk generator for the key path `(seed, parts...)`. The full 256-bit
/// ChaCha seed is filled from four hash lanes so distinct paths collide with
/// negligible probability.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for lane in 0u64..4 {
        let mut path = Vec::with_capacity(parts.len() + 2);
        path.push(seed);
        path.push(lane ^ 0xA5A5_0000);
        path.extend_from_slice(parts);
        key[(lane as usize * 8)..(lane as usize * 8 + 8)]
            .copy_from_slice(&mix(&path).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Seed for replicate `rep` of an experiment.
pub fn replicate_seed(seed: u64, rep: u64) -> u64 {
    mix(&[seed, tag::REPLICATE, rep])
}
