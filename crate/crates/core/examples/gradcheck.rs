//! Finite-difference gradient checks over every layer type.
//!
//! ```text
//! cargo run --release --example gradcheck -- [base-seed]
//! ```

use swin_res_net::gradcheck::run_suite;

fn main() -> swin_res_net::Result<()> {
    let base: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = run_suite(&[base, base + 1, base + 2], |c| {
        println!(
            "{:<13} {} seed {:<3} max rel err {:.2e} (tol {:.0e}, {} coords, {} one-sided) {}",
            c.layer,
            c.precision,
            c.seed,
            c.max_rel_error,
            c.tolerance,
            c.coords,
            c.one_sided,
            if c.passed { "ok" } else { "FAIL" }
        );
        if !c.passed {
            println!("    worst {} analytic {:e} numeric {:e}", c.worst, c.analytic, c.numeric);
        }
    })?;
    println!("{} checks in {:.1?}: {}", report.checks.len(), report.elapsed, if report.passed() { "all passed" } else { "failures" });
    Ok(())
}
