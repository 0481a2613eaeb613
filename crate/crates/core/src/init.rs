//! Seeded parameter initialization.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `rows × cols` matrix of i.i.d. `N(0, std²)` draws in row-major order.
pub fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}
