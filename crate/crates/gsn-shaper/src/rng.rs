//! Deterministic random-number streams.
//!
//! Everything stochastic in this crate draws from a ChaCha8 generator seeded
//! explicitly. Training derives one stream per (seed, step, purpose) triple,
//! so resuming from a checkpoint at step `s` reproduces the exact draws the
//! uninterrupted run would have made from step `s` onward.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for an independent stream of a seeded family.
///
/// Streams with distinct `stream` indices never overlap, so callers can hand
/// out sub-generators without coordinating draw counts.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
