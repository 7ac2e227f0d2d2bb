//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from the master seed plus a
//! tag path (client id, round, purpose), so results do not depend on the order
//! in which clients or grid points are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a tag path into the seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Purpose tags, kept distinct so streams never collide across subsystems.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const EL_INSTANCE: u64 = 6;
    pub const THEORY: u64 = 7;
    pub const TEST_SET: u64 = 8;
    pub const HEADS: u64 = 9;
}
