//! Seed handling. Every random draw in the crate starts from a `u64` seed
//! passed through [`seeded_rng`]; sub-seeds come from [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for stream `index` under `seed`: `seed ^ mix64(index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ mix64(index)
}

/// Named sub-streams used by the pipeline and CLI.
pub mod stream {
    pub const WHOLE: u64 = 0x5748_4f4c_4500_0001;
    pub const APPROX: u64 = 0x4150_5052_4f58_0002;
    pub const FINETUNE: u64 = 0x4649_4e45_0000_0003;
    pub const SOURCES: u64 = 0x534f_5552_4345_0004;
    pub const EVAL: u64 = 0x4556_414c_0000_0005;
    pub const RANDOM_LABELS: u64 = 0x5241_4e44_0000_0006;
    pub const SYNTH: u64 = 0x5359_4e54_4800_0007;
    pub const THEOREM: u64 = 0x5448_4d31_0000_0008;
    pub const HEAD: u64 = 0x4845_4144_0000_0009;
}
