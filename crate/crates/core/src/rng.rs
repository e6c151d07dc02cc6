//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 generator keyed by the run
//! seed and a fixed stream id, so the same seed replays the same numbers
//! regardless of which other steps ran before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Scene rendering; the scene index is mixed into the seed.
pub const STREAM_DATA: u64 = 1;
/// Weight initialization.
pub const STREAM_INIT: u64 = 2;
/// Epoch shuffling.
pub const STREAM_SHUFFLE: u64 = 3;
/// Dropout masks.
pub const STREAM_DROPOUT: u64 = 4;
/// Anchor and RoI minibatch sampling.
pub const STREAM_SAMPLING: u64 = 5;
/// Random instances of the gradient-check harness.
pub const STREAM_GRADCHECK: u64 = 6;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Independent stream for item `index` of a family (e.g. one scene).
pub fn indexed_stream(seed: u64, id: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(id);
    rng
}
