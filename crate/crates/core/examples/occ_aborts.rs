//! Write contention on one shared file. Write-through revocations abort and
//! retry while a writer keeps bumping the version; write-back never aborts.

use std::time::Duration;

use leasefs::bench::{run, WorkloadSpec};
use leasefs::types::CacheMode;

pub fn main() -> leasefs::Result<()> {
    for mode in [CacheMode::WriteThroughOcc, CacheMode::WriteBackLease] {
        let r = run(&WorkloadSpec {
            mode,
            read_pct: 0,
            files: 1,
            contention: 100,
            file_size: 16 * 4096,
            duration: Duration::from_secs(1),
            ..Default::default()
        })?;
        println!(
            "{mode:>16}: {} ops, {} revocations, {} OCC aborts, {} refused",
            r.ops, r.revocations, r.occ_aborts, r.unavailable
        );
    }
    Ok(())
}
