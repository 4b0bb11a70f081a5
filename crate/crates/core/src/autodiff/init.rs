use rand::Rng;

use super::tensor::Tensor;

/// He-uniform weights: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
