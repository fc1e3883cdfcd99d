//! The seeded finite-difference suites behind `l2tww verify`.
//!
//!     cargo run --release -p l2tww --example oracle_suites -- 10

use l2tww::verify::{self, Suite};

fn main() -> l2tww::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let reports = verify::run(Suite::All, seeds)?;
    for r in verify::summarize(&reports) {
        println!(
            "{:<4} {:<14} {:<22} {:.2e} (tol {:.0e})",
            if r.passed() { "ok" } else { "FAIL" },
            r.suite,
            r.op,
            r.error,
            r.tolerance
        );
    }
    println!("{} cases", reports.len());
    Ok(())
}
