//! Seed derivation.
//!
//! Every random stream in the simulator comes from a ChaCha8 generator whose
//! seed is derived from a master seed and a list of integer labels by folding
//! the labels through the SplitMix64 finalizer:
//!
//! ```text
//! state = mix(master ^ GOLDEN)
//! for label in labels: state = mix(state ^ mix(label + GOLDEN))
//! ```
//!
//! The derivation is stable across runs and platforms, so e.g. the noise of
//! hop `h` on batch `b` is always `derive(master, &[STREAM_NOISE, h, b])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream labels used as the first derivation word, so that streams of
/// different purpose never collide.
pub mod stream {
    pub const NOISE: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const MASK: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const CLIENT: u64 = 7;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(master ^ GOLDEN), |state, &label| {
        mix(state ^ mix(label.wrapping_add(GOLDEN)))
    })
}

pub fn rng_from(master: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(master, labels))
}
