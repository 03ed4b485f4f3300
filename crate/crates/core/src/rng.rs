//! Random stream derivation.
//!
//! Every unit of work gets its own ChaCha8 stream. The stream seed is a
//! SplitMix64 fold of the master seed with a path of task labels, so the
//! stream a task sees depends only on its labels and never on scheduling
//! or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `labels` into `master`, one SplitMix64 round per label.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(master.wrapping_add(GOLDEN)), |acc, &l| {
        mix(acc ^ mix(l.wrapping_add(GOLDEN)))
    })
}

pub fn stream(master: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}

/// Stable numeric tags for the experiment phases, used as first label.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const TEST: u64 = 2;
    pub const TRAJECTORY: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const REFERENCE: u64 = 6;
    pub const UTURN: u64 = 7;
    pub const START: u64 = 8;
    pub const PAIR: u64 = 9;
    pub const SPLIT: u64 = 10;
}
