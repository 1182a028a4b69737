//! Intrinsic decoherence: closed form, Kraus sum and the perturbative
//! Kraus expansion.
//!
//! cargo run --example milburn_decoherence

use opensys::linalg::{c, partial_trace_env, trace_distance_ops, DenseOperator, DensityMatrix};
use opensys::milburn::{MilburnEvolution, MilburnOrders, MilburnParams, MilburnSeries};
use opensys::models::{pauli_x, pauli_z};
use opensys::sesr::SesrBasis;

fn main() -> opensys::error::Result<()> {
    let id = DenseOperator::identity(2, 2);
    let h0 = pauli_z().kronecker(&id) * c(0.9, 0.0) + id.kronecker(&pauli_z()) * c(0.4, 0.0);
    let h1 = pauli_x().kronecker(&pauli_x()) * c(0.15, 0.0);
    let basis = SesrBasis::from_factors(id.clone(), id.clone(), vec![1.3, 0.5, -0.5, -1.3])?;

    let plus = DenseOperator::from_element(2, 2, c(0.5, 0.0));
    let rho0 = DensityMatrix::new(plus.kronecker(&plus))?;
    let p = MilburnParams::new(0.1);
    let exact = MilburnEvolution::new(&(&h0 + &h1), p)?;
    let series = MilburnSeries::new(&basis, &h1, p, 1 << 20)?;

    println!("    t   purity    Kraus K  defect     perturbative error (L = 1, 2, 3)");
    for t in [0.5, 1.0, 2.0, 4.0] {
        let closed = exact.closed_form(rho0.op(), t)?;
        let (_, report) = exact.kraus_sum(rho0.op(), t, None)?;
        let reduced = partial_trace_env(&closed, 2, 2)?;
        let errs: Vec<String> = (1..=3)
            .map(|l| {
                let got = series.reduced(&rho0, t, MilburnOrders { k_max: report.k_max, l_max: l })?;
                Ok(format!("{:.2e}", trace_distance_ops(got.op(), &reduced)?))
            })
            .collect::<opensys::error::Result<_>>()?;
        let purity = DensityMatrix::new_unchecked(closed).purity();
        println!("{t:>5}   {purity:.6}  {:>7}  {:.1e}    {}", report.k_max, report.defect, errs.join("  "));
    }
    Ok(())
}
