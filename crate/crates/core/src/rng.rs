//! Deterministic seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator keyed from the run seed
//! plus a domain tag and index, so results do not depend on the order in which
//! streams are consumed or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for the independent streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ThetaInit = 1,
    DataSelect = 2,
    Partition = 3,
    Shuffle = 4,
    Shadows = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream tag and an index into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(
        splitmix64(seed ^ splitmix64(stream as u64)) ^ splitmix64(index.wrapping_add(0xA5A5)),
    )
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
