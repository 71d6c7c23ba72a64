//! Named random sub-streams derived from one run seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that adding
//! draws in one place (say, dropout) never shifts the numbers seen elsewhere
//! (say, weight initialisation).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Sampling,
    LfAnchors,
    Split,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Dropout => 3,
            Stream::Sampling => 4,
            Stream::LfAnchors => 5,
            Stream::Split => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
