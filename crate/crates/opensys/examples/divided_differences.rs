//! Divided differences of `exp(-i x t)` through distinct, close and
//! coincident nodes.
//!
//! cargo run --example divided_differences

use opensys::divdiff::{divided_difference, divided_difference_exp, Kernel};

fn main() {
    let t = 1.5;
    println!("distinct   {:.12}", divided_difference_exp(&[0.2, 0.9, -0.4], t));
    for gap in [1e-2, 1e-4, 1e-6] {
        println!("gap {gap:.0e}  {:.12}", divided_difference_exp(&[0.2, 0.2 + gap, 0.2 + 2.0 * gap], t));
    }
    // the coincident limit is f''(x)/2 = -t^2 e^{-ixt}/2
    println!("confluent  {:.12}", divided_difference_exp(&[0.2, 0.2, 0.2], t));

    // x^3 over (1, 2) is 1 + 2 + 4
    println!("x^3 on [1, 2] = {}", divided_difference(Kernel::Power { k: 3 }, &[1.0, 2.0], 0.0).re);
}
