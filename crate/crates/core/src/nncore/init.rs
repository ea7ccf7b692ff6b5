use rand::Rng;

use super::tensor::{Real, Tensor};

/// Kaiming-uniform (ReLU gain): `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}
