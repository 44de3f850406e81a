//! Named random streams derived from one global seed.
//!
//! Every consumer of randomness (teacher init, tuple sampling, cutoff masks,
//! ...) draws from its own stream so that changing one component never
//! shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(fnv1a(name));
    r
}

/// Stream `name` with an integer suffix, e.g. one per step or per replicate.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    stream(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), name)
}
