//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`),
//! keyed by one root `u64` seed. Independent consumers use distinct ChaCha
//! stream ids so that, e.g., parameter initialization and batch shuffling
//! never perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// Stream used for per-epoch batch shuffling.
pub const SHUFFLE_STREAM: u64 = 1;
/// Stream used by synthetic data generators.
pub const DATA_STREAM: u64 = 2;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
