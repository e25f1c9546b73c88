//! Random parameter initialisers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Real, Tensor};

/// Entries drawn from `N(0, std²)`.
pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Linear map `out×in` scaled by `1/√in`.
pub fn linear<T: Real, R: Rng>(rng: &mut R, out: usize, inp: usize) -> Tensor<T> {
    normal(rng, &[out, inp], 1.0 / (inp as f64).sqrt())
}

/// He initialisation for a `co×ci×k×k` kernel feeding a ReLU.
pub fn kaiming<T: Real, R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Tensor<T> {
    normal(rng, &[co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt())
}
