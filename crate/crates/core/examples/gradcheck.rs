//! Finite-difference checks of the analytic gradients, as `hyperlearn gradcheck` runs them.

use hyperlearn::gradcheck::{objective_suite, refiner_suite, OBJECTIVE_STEP, REFINER_STEP};

fn main() -> hyperlearn::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for r in [objective_suite(seed, 20, OBJECTIVE_STEP)?, refiner_suite(seed, 10, REFINER_STEP)?] {
        println!(
            "{:10} {:3} cases  max rel err {:.2e}  tol {:.0e}  {}",
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
