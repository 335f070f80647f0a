//! Seeded random streams derived from one root seed.
//!
//! Every consumer draws from its own ChaCha stream, so adding draws in one
//! place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Split = 4,
    PoolSample = 5,
    RandomScore = 6,
    FineTune = 7,
    Toy = 8,
}

/// RNG for `purpose` at position `index` (an epoch, iteration, ...).
pub fn derived_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
