//! Improved perturbed energies of the transverse-field spin bath against the
//! exact two-level eigenvalue.
//!
//! cargo run --example improved_energies

use opensys::models::{improved_energy_report, SesrCase, SpinBathSpec};

fn main() -> opensys::error::Result<()> {
    println!("    f     improved        exact           error");
    let mut last = None;
    for scale in [1.0, 0.5, 0.25] {
        let spec = SpinBathSpec::extended(2.0, vec![0.3 * scale], vec![0.4 * scale]);
        let r = improved_energy_report(&spec, SesrCase::One, 0, 0)?;
        let err = (r.g_sum - r.exact).abs();
        let ratio = last.map(|prev: f64| format!("  (ratio {:.1})", prev / err)).unwrap_or_default();
        println!("{:>5}  {:.10}  {:.10}  {err:.3e}{ratio}", 0.5 * scale, r.g_sum, r.exact);
        last = Some(err);
    }
    Ok(())
}
