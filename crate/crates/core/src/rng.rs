//! Seeded random streams.
//!
//! Every experiment draws from ChaCha8 keyed by a 64-bit seed. ChaCha is a
//! counter-based generator with 2^64 independent streams per key, so a trial
//! index selects a stream and trials never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
