//! Finite-difference verification of the analytic gradients of both model families.
//!
//! Run with `cargo run --example gradient_check`.

use xrid::nn::gradcheck::{standard_suite, TOLERANCE};

fn main() -> xrid::Result<()> {
    let mut all = true;
    for report in standard_suite(0)? {
        println!(
            "{:<10} probed {:>4}  max relative error {:.2e}  worst {}",
            report.name, report.probed, report.max_relative_error, report.worst_parameter
        );
        all &= report.passed();
    }
    println!("{} (tolerance {TOLERANCE:.0e})", if all { "all gradients agree" } else { "gradient mismatch" });
    Ok(())
}
