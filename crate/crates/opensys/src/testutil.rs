//! Random instances shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{c, hermitian_part, DenseOperator};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
    DenseOperator::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
    hermitian_part(&random_matrix(n, rng))
}

/// `A A^dagger / Tr(A A^dagger)` for a random `A`.
pub fn random_density(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
    let a = random_matrix(n, rng);
    let rho = &a * a.adjoint();
    let tr = rho.trace();
    rho / tr
}

pub fn sx() -> DenseOperator {
    DenseOperator::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn sz() -> DenseOperator {
    DenseOperator::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}
