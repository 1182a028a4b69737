#![allow(dead_code)]

use opensys::linalg::{c, hermitian_part, DenseOperator, DensityMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(n: usize, r: &mut ChaCha8Rng) -> DenseOperator {
    DenseOperator::from_fn(n, n, |_, _| c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
}

pub fn random_hermitian(n: usize, r: &mut ChaCha8Rng) -> DenseOperator {
    hermitian_part(&random_matrix(n, r))
}

pub fn random_density(n: usize, r: &mut ChaCha8Rng) -> DensityMatrix {
    let a = random_matrix(n, r);
    let p = &a * a.adjoint();
    let tr = p.trace();
    DensityMatrix::new(hermitian_part(&(p / tr))).unwrap()
}

pub fn scaled(op: DenseOperator, x: f64) -> DenseOperator {
    op * c(x, 0.0)
}

/// `|+><+|` on every one of `n` qubits.
pub fn plus_product(n: usize) -> DensityMatrix {
    let plus = DensityMatrix::new(DenseOperator::from_element(2, 2, c(0.5, 0.0))).unwrap();
    let mut acc = plus.clone();
    for _ in 1..n {
        acc = acc.tensor(&plus).unwrap();
    }
    acc
}
