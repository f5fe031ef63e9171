//! Named, seed-derived random streams.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by `(seed, name)`, so that
//! e.g. the bootstrap weights of one method do not shift when another method consumes more noise.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const WEIGHTS: &str = "weights";
pub const NOISE: &str = "noise";
pub const GAMMA: &str = "gamma";
pub const FOLDS: &str = "folds";
pub const INIT: &str = "init";
pub const DATA: &str = "data";

/// Stream `name` of the root `seed`.
pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Child generator for work item `index`, derived without consuming the parent stream.
pub fn child(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(fnv1a(name.as_bytes()).wrapping_add(index));
    rng
}

/// Fresh seed drawn from an existing generator, for handing to a child computation.
pub fn fork_seed<R: RngCore>(rng: &mut R) -> u64 {
    rng.next_u64()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
