//! Drive the scenario runner from code; the `opensys` binary does the same
//! from a file.
//!
//! cargo run --example run_scenario

use opensys::harness::{compute, parse_scenario_str, render_csv, render_summary, LoadedScenario};

const SCENARIO: &str = r#"{
    "model": {"kind": "extended", "mu": 0.8, "x": [0.2, 0.1], "z": [0.3, 0.25], "bath_field": [0.5, 0.35]},
    "initial_state": {"system": "plus", "environment": "thermal"},
    "method": {"kind": "improved_master"},
    "beta_b": 1.0,
    "t_start": 0.0, "t_end": 1.0, "n_steps": 4,
    "oracle": true
}"#;

fn main() {
    let scenario = parse_scenario_str(SCENARIO).expect("valid scenario");
    let loaded = LoadedScenario::new(scenario.clone(), ".");
    loaded.validate().expect("valid scenario");
    let out = compute(&loaded, false).expect("run");
    print!("{}", render_csv(&out));
    print!("{}", render_summary(&scenario, &out, None).expect("summary"));
}
