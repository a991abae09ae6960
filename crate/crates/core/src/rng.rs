//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 generator keyed by the
//! run seed plus a named substream and an index, so a path, an initialization
//! or an evaluation batch can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Paths,
    Init,
    Eval,
    Check,
    Other(u16),
}

impl Substream {
    fn tag(self) -> u64 {
        match self {
            Substream::Paths => 1,
            Substream::Init => 2,
            Substream::Eval => 3,
            Substream::Check => 4,
            Substream::Other(k) => 0x100 + u64::from(k),
        }
    }
}

/// Independent generator for `(seed, substream, index)`.
pub fn stream(seed: u64, substream: Substream, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((substream.tag() << 48) ^ index);
    rng
}

/// Derive a child seed from a generator, for handing to code that takes a seed.
pub fn child_seed(rng: &mut SimRng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
