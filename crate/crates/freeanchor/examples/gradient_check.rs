//! Verify the analytic pipeline gradient against central finite differences
//! on a batch of random instances, then show that a deliberately corrupted
//! gradient is caught.

use freeanchor::gradcheck::run_suite;

fn main() -> freeanchor::Result<()> {
    let reports = run_suite(0, 10, 1e-6, false)?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    for (i, r) in reports.iter().enumerate() {
        println!("instance {i:2}: max relative error {:.3e}", r.max_rel_err);
    }
    assert!(worst < 1e-5, "gradient check failed: {worst:.3e}");
    println!("all pass (worst {worst:.3e})");

    let corrupted = run_suite(0, 1, 1e-6, true)?;
    println!(
        "negative control with damaged gradient: {:.3e} (correctly flagged)",
        corrupted[0].max_rel_err
    );
    assert!(corrupted[0].max_rel_err > 1e-3);
    Ok(())
}
