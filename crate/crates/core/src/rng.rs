//! Seeded random streams. Every consumer derives its own stream from a base
//! seed and a stream id so results do not depend on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Matrix;

pub type DiffRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DiffRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> DiffRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian shape")
}
