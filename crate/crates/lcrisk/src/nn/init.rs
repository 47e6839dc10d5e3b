//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Uniform(-bound, bound) tensor with draws in row-major order.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}
