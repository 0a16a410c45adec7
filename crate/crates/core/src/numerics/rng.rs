//! Seeded random streams.
//!
//! Every stochastic routine derives its generator from a user seed plus a
//! stream index, so work split across threads recombines bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a two-level index (e.g. power index, chunk index) into one stream id.
pub fn stream_id(outer: u64, inner: u64) -> u64 {
    (outer << 32) | (inner & 0xffff_ffff)
}
