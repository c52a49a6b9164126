//! Seeded parameter initialisation.

use rand::Rng;

use crate::scalar::Scalar;

use super::Tensor;

/// He-uniform: `U(-√(6/fan_in), √(6/fan_in))` where `fan_in` is the product of
/// all dimensions after the first.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}
