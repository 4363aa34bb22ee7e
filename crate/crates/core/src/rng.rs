//! Seeded random streams.
//!
//! Every random decision in a run draws from a [`ChaCha8Rng`] keyed by the run
//! seed and a named stream. The stream id is the 64-bit FNV-1a hash of the
//! stream name, so `stream(seed, "stage1")` is reproducible across platforms
//! and independent of how many draws other streams made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Independent generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
