use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

/// Uniform entries in `[-scale, scale)`.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}
