//! Finite-difference check of every differentiable op.

use ftz::checks::gradcheck_suite;

fn main() -> ftz::Result<()> {
    for r in gradcheck_suite(10, 0)? {
        println!("{:<22} {:.2e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
    }
    Ok(())
}
