//! Seed derivation. Every random object in the crate comes from a ChaCha
//! stream keyed by a parent seed and a domain tag, so streams never collide
//! and results are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssvc_autodiff::Tensor;

pub type SeededRng = ChaCha8Rng;

/// splitmix64 finalizer; mixes a parent seed with a domain tag.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, domain: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain))
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect()
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).expect("shape matches")
}

pub mod domain {
    pub const SPEAKER: u64 = 1;
    pub const TABLES: u64 = 2;
    pub const PROSODY: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const CHUNK: u64 = 5;
    pub const ENCODER: u64 = 6;
    pub const CORPUS: u64 = 7;
    pub const CODEC_INIT: u64 = 8;
    pub const CODEC_TRAIN: u64 = 9;
    pub const LM_INIT: u64 = 10;
    pub const LM_TRAIN: u64 = 11;
    pub const SAMPLE: u64 = 12;
    pub const PROBE: u64 = 13;
    pub const EVAL: u64 = 14;
}
