//! Random parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::tensor::Tensor;

/// Normal(0, std) truncated to ±2·std by resampling.
pub fn trunc_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// He-normal initialization for layers followed by a rectifying nonlinearity.
pub fn he_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()).expect("shape matches")
}

/// Uniform values in `[lo, hi)`.
pub fn uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()).expect("shape matches")
}
