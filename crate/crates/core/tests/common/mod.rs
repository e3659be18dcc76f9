#![allow(dead_code)]

use bitstorm_core::{Dataset32, Model32, Tensor32};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[lo, hi)` with 24 bits of resolution.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
    lo + (hi - lo) * unit
}

pub fn below(rng: &mut ChaCha8Rng, n: u32) -> u32 {
    ((u64::from(rng.next_u32()) * u64::from(n)) >> 32) as u32
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor32 {
    let len = shape.iter().product();
    let data = (0..len).map(|_| uniform(rng, lo, hi)).collect();
    Tensor32::new(shape.to_vec(), data).unwrap()
}

/// `n` unlabelled inputs drawn uniformly from `[-1, 1)` for `model`.
pub fn random_inputs(rng: &mut ChaCha8Rng, model: &Model32, n: usize) -> Dataset32 {
    let samples = (0..n).map(|_| random_tensor(rng, model.input_shape(), -1.0, 1.0)).collect();
    Dataset32::new(samples, None, model.class_count()).unwrap()
}
