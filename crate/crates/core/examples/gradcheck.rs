//! Finite-difference check of every hand-written backward pass.

use anchorflow::gradcheck::{run_gradcheck, GradcheckOptions};

fn main() -> anchorflow::Result<()> {
    let report = run_gradcheck(&GradcheckOptions::default())?;
    for c in &report.components {
        println!("{:<18} {:>4} probes  {:.2e}", c.component, c.probes, c.max_rel_error);
    }
    println!("{}", if report.passed { "all passed" } else { "FAILED" });
    Ok(())
}
