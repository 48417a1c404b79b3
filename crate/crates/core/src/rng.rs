//! Seed splitting.
//!
//! A single `u64` seed expands into independent ChaCha8 streams. Stream ids
//! are plain counters: the batch driver uses `stream = run index`, and each
//! subsystem that needs its own generator offsets into a disjoint id range.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream id offsets per subsystem. Run-indexed streams live below
/// `STREAM_BLOCK`.
pub const STREAM_BLOCK: u64 = 1 << 40;
pub const TRACE_STREAMS: u64 = 1;
pub const MODEL_STREAMS: u64 = 2;
pub const PREDICT_STREAMS: u64 = 3;

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generator `index` within a subsystem's block of streams.
pub fn substream(seed: u64, block: u64, index: u64) -> Rng {
    stream(seed, block * STREAM_BLOCK + index)
}
