//! Shared fixtures for the criterion benchmarks.

use pnpgrad::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic random image in [0,1].
pub fn bench_image<T: Scalar>(c: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[1, c, h, w], 0.0, 1.0, &mut rng)
}

/// Deterministic random tensor with the given shape.
pub fn bench_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 0.1, &mut rng)
}
