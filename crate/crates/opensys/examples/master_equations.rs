//! Second-order master equations for a qubit in a two-spin bath, measured
//! against exact reduced dynamics.
//!
//! cargo run --example master_equations

use opensys::linalg::DensityMatrix;
use opensys::master::{thermal_state, uniform_grid, FactorizedInitialState, ThermalParams};
use opensys::models::{spin_bath_open_system, SpinBathSpec};
use opensys::oracle::{compare_methods, CompareOptions, ComparisonModel, Method};

fn main() -> opensys::error::Result<()> {
    // dephasing coupling; the thermal bath of sum_k W_k sx_k has zero mean field
    let spec = SpinBathSpec::extended(1.0, vec![0.0, 0.0], vec![0.2, 0.1]);
    let open = spin_bath_open_system(&spec, &[0.9, 0.6])?;
    let rho_e = thermal_state(&open.h_e, ThermalParams { beta_b: 0.8 })?;
    let rho_s = DensityMatrix::pure(&nalgebra::dvector![
        num_complex::Complex64::new(0.8, 0.0),
        num_complex::Complex64::new(0.6, 0.0)
    ])?;
    let initial = FactorizedInitialState::new(rho_s, rho_e)?;
    let model = ComparisonModel::inherent(open)?;

    let grid = uniform_grid(0.0, 3.0, 30);
    let methods = [
        Method::PerturbedMaster,
        Method::ImprovedMaster,
        Method::Redfield,
        Method::ExactTruncatedMaster { depth: 2, max_order: 3 },
    ];
    let report = compare_methods(&model, &initial, &grid, &methods, &CompareOptions::default())?;
    for m in &report.methods {
        println!("{:<32} max {:.3e}  at t = 3: {:.3e}", m.method, m.max_trace_distance, m.endpoint_trace_distance);
    }
    Ok(())
}
