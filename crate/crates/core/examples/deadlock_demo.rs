//! Naive write-through revocation deadlocks on reversed lock order; the OCC
//! revoker runs the same script to completion.

use leasefs::client::demo::{deadlock_demo, DemoOutcome};

pub fn main() -> leasefs::Result<()> {
    for naive in [true, false] {
        let label = if naive { "naive" } else { "occ" };
        match deadlock_demo(naive)? {
            DemoOutcome::DeadlockDetected { cycle, after } => {
                println!("{label}: deadlock after {after:?}, cycle {}", cycle.join(" -> "))
            }
            DemoOutcome::Completed { after } => println!("{label}: completed in {after:?}"),
        }
    }
    Ok(())
}
