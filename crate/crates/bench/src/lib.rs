//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slb_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Values drawn uniformly from `{-1, +1}`.
pub fn signs(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Values drawn uniformly from `{0, 1}`.
pub fn bits01(n: usize, seed: u64) -> Vec<f64> {
    signs(n, seed).into_iter().map(|s| (s + 1.0) / 2.0).collect()
}
