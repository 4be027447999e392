//! Compares backprop against central differences for every graph op, the
//! vector field and both losses.

use dyadic_motion::checks::{all_checks, GRAD_TOLERANCE};

fn main() -> dyadic_motion::Result<()> {
    let checks = all_checks(0)?;
    for c in &checks {
        println!("{:<24} {:.2e} {}", c.name, c.rel_err, if c.passed(GRAD_TOLERANCE) { "ok" } else { "FAIL" });
    }
    let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.2e}", checks.len());
    Ok(())
}
