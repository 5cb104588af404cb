//! Seeded random streams.
//!
//! All randomness derives from one 64-bit seed. Each consumer asks for a
//! named sub-stream so adding a new consumer never shifts the numbers seen
//! by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dataset,
    Noise,
    Init,
    Batching,
    TestSet,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Dataset => 1,
            Stream::Noise => 2,
            Stream::Init => 3,
            Stream::Batching => 4,
            Stream::TestSet => 5,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
    rng.set_stream(stream.id());
    rng
}

/// Sub-stream further split by an index, e.g. per trajectory or per layer.
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(index.wrapping_add(0x5151))));
    rng.set_stream(stream.id());
    rng
}
