//! The dephasing spin bath, where the improved series after redivision is
//! the exact solution.
//!
//! cargo run --example zurek_dephasing

use opensys::linalg::{c, DenseOperator, DensityMatrix};
use opensys::models::{spin_bath_open_system, SpinBathSpec};
use opensys::oracle::{compare_methods, CompareOptions, ComparisonModel, Method};
use opensys::master::FactorizedInitialState;
use opensys::propagator::{SeriesConfig, SeriesEvolution};

fn main() -> opensys::error::Result<()> {
    let z = vec![0.9, 0.55, 0.3, 0.12];
    let model = ComparisonModel::inherent(spin_bath_open_system(&SpinBathSpec::zurek(z.clone()), &[])?)?;
    let plus = DensityMatrix::new(DenseOperator::from_element(2, 2, c(0.5, 0.0)))?;
    let mut env = plus.clone();
    for _ in 1..z.len() {
        env = env.tensor(&plus)?;
    }
    let initial = FactorizedInitialState::new(plus, env)?;

    let series = SeriesEvolution::new(&model.basis, &model.h1_sesr, &SeriesConfig::improved(5))?;
    println!("    t   2 Re rho_01        prod cos(2 Z_k t)");
    for t in [0.0, 0.5, 1.0, 5.0, 20.0] {
        let rho_s = series.reduced(&initial.total()?, t)?.rho;
        let product: f64 = z.iter().map(|zk| (2.0 * zk * t).cos()).product();
        println!("{t:>5}   {:+.15}  {product:+.15}", 2.0 * rho_s.op()[(0, 1)].re);
    }

    let grid: Vec<f64> = (0..=10).map(|k| 0.05 * k as f64).collect();
    let methods = [Method::ImprovedSeries { energy_order: 5 }, Method::ExactSeries { order: 2 }, Method::PerturbedMaster];
    let report = compare_methods(&model, &initial, &grid, &methods, &CompareOptions::default())?;
    for m in &report.methods {
        println!("{:<20} max trace distance {:.2e}", m.method, m.max_trace_distance);
    }
    Ok(())
}
