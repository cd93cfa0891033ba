//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha stream keyed by
//! `(seed, purpose, index)`, so a run is reproducible from its seed alone and
//! resuming at step `s` needs no generator state beyond the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batching = 2,
    Dropout = 3,
    Data = 4,
    Mapping = 5,
    Check = 6,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}
