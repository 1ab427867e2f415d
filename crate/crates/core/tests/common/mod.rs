#![allow(dead_code)]

pub mod gradcheck;

use abn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1].
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..=1.0))
}

/// Uniform in [-1, 1] but at least `margin` away from zero, so ReLU kinks
/// are never straddled by a finite-difference probe.
pub fn uniform_away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(margin..=1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Positive probabilities in rows that need not be normalized.
pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..=0.95))
}

/// Two-class network on 8×8 two-channel inputs: one conv per stage, two
/// channels in the first stage.
pub fn micro_spec() -> abn_core::NetworkSpec {
    abn_core::NetworkSpec {
        base_width: 2,
        in_channels: 2,
        ..abn_core::NetworkSpec::small_vgg(1, 2)
    }
}
