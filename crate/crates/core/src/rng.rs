//! Seed derivation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent child seed for `stream` under `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
