use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Sampling distribution for [`rand_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    /// Standard normal (ziggurat sampler from `rand_distr`).
    Normal,
    /// Uniform on `[-1, 1)`.
    Uniform,
}

/// The crate-wide generator: ChaCha8 seeded from a `u64` via
/// `SeedableRng::seed_from_u64`. Streams are stable across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random matrix filled row-major from [`seeded_rng`]`(seed)`.
pub fn rand_matrix(rows: usize, cols: usize, seed: u64, dist: Dist) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::ZeroDimension { rows, cols });
    }
    let mut rng = seeded_rng(seed);
    let data = (0..rows * cols)
        .map(|_| match dist {
            Dist::Normal => rng.sample::<f64, _>(StandardNormal),
            Dist::Uniform => rng.random_range(-1.0..1.0),
        })
        .collect();
    Ok(DenseMatrix::from_vec_unchecked(rows, cols, data))
}
