//! Seed plumbing. Every random draw in the crate comes from a ChaCha stream
//! derived from a master seed; nothing touches OS entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of `seed`. Used so that per-scene or
/// per-cell work can run in any order and still reproduce sequential results.
pub fn substream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
