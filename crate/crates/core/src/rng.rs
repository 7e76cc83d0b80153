//! Named random sub-streams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Shuffle,
    Split,
    Phantom,
    Synth,
    Check,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Shuffle => 3,
            Stream::Split => 4,
            Stream::Phantom => 5,
            Stream::Synth => 6,
            Stream::Check => 7,
        }
    }
}

/// Generator for `(seed, stream)`. Distinct streams never overlap.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Generator for `(seed, stream)` further keyed by an index such as an
/// epoch or a worker number.
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    stream(mixed, which)
}
