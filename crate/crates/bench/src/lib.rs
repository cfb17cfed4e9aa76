//! Deterministic inputs shared by the benchmarks.

use dsfa_core::linalg::SquareMatrix;
use dsfa_core::PixelMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> PixelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// A symmetric positive-definite `d×d` matrix, `M Mᵀ / d + I`.
pub fn random_spd(d: usize, seed: u64) -> SquareMatrix {
    let m = random_matrix(d, d, seed);
    m.dot(&m.t()) / d as f64 + Array2::<f64>::eye(d)
}

pub fn random_symmetric(d: usize, seed: u64) -> SquareMatrix {
    let m = random_matrix(d, d, seed);
    (&m + &m.t()) * 0.5
}

/// A second date that follows the first with a little noise.
pub fn noisy_copy(x: &PixelMatrix, noise: f64, seed: u64) -> PixelMatrix {
    x + &(random_matrix(x.nrows(), x.ncols(), seed) * noise)
}
