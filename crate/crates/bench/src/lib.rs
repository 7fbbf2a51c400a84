//! Input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmhash_core::retrieval::{binarize_and_pack, PackedCodes};
use xmhash_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-scale, scale)`.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_codes(rng: &mut ChaCha8Rng, n: usize, bits: usize) -> PackedCodes {
    binarize_and_pack(&uniform(rng, n, bits, 1.0))
}
