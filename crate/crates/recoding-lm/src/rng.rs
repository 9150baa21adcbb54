//! Deterministic RNG streams.
//!
//! Every stochastic site (parameter init, decoder dropout, signal masks)
//! draws from its own sub-stream derived from the master seed plus a tag
//! path. Sub-streams are independent of evaluation order, which is what
//! lets the parallel signal/evaluation paths reproduce the sequential
//! results bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, kept in one place so call sites cannot collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SIGNAL: u64 = 3;
    pub const ENSEMBLE: u64 = 4;
    pub const VERIFIER: u64 = 5;
}

/// splitmix64 finalizer; good avalanche for combining tag components.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-stream seed from the master seed and a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut acc = mix64(master);
    for &t in tags {
        acc = mix64(acc ^ t);
    }
    acc
}

/// A seeded ChaCha8 generator for the given tag path.
pub fn substream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
