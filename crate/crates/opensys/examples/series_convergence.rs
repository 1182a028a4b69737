//! Truncated perturbation series against the exact propagator.
//!
//! cargo run --example series_convergence

use opensys::linalg::{c, frobenius, hermitian_part, DenseOperator};
use opensys::oracle::ExactEvolution;
use opensys::propagator::{ExactSeries, SeriesConfig};
use opensys::sesr::{build_sesr, perturbation_matrix, CouplingDecomposition, HamiltonianSplit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
    hermitian_part(&DenseOperator::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
}

fn main() -> opensys::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ds, de, t) = (2, 6, 1.0);
    let h1 = random_hermitian(ds * de, &mut rng);
    let h1 = &h1 * c(0.5 / frobenius(&h1), 0.0);
    let split = HamiltonianSplit::new(
        random_hermitian(ds, &mut rng),
        random_hermitian(de, &mut rng),
        CouplingDecomposition::default(),
        h1,
    )?;
    let basis = build_sesr(&split)?;
    let h1_sesr = perturbation_matrix(&split.h_tot1, &basis)?.h1_full();
    let exact = basis.to_sesr(&ExactEvolution::new(&split.h_tot()?)?.propagator(t));

    let series = ExactSeries::new(&basis.energies, &h1_sesr, &SeriesConfig::exact(5))?;
    let mut partial = DenseOperator::zeros(ds * de, ds * de);
    println!("order  |sum A_l - exp(-iHt)|_F");
    for term in series.terms(t)? {
        partial += term.matrix;
        println!("{:>5}  {:.3e}", term.order, frobenius(&(&partial - &exact)));
    }
    Ok(())
}
