//! Reconstructs lease intervals from a grant-log dump and checks that no
//! write lease ever overlaps another holder.

use leasefs::checker::{check_lease_ledger, LedgerVerdict};

const DUMP: &str = "\
1 grant 0:1 1 read
2 grant 0:1 2 read
3 revoke 0:1 1 read
4 revoke 0:1 2 read
5 grant 0:1 3 write
6 remove 0:1 3 write
";

const BROKEN: &str = "\
1 grant 0:1 1 write
2 grant 0:1 2 read
";

pub fn main() -> Result<(), Box<dyn std::error::Error>> {
    match check_lease_ledger(DUMP)? {
        LedgerVerdict::Pass(ledger) => {
            for i in &ledger.intervals {
                println!("{i:?}");
            }
        }
        v => println!("unexpected: {v:?}"),
    }
    println!("broken log: {:?}", check_lease_ledger(BROKEN)?);
    Ok(())
}
