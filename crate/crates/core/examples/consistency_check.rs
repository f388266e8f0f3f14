//! Runs scheduled scenarios under each cache mode and checks the traces.
//! Pass a `.scn` file to check a scenario of your own.

use leasefs::checker::{
    check_lease_ledger, check_linearizable, parse_scenario, random_scenario, scheduled_interleave, RandomSpec,
    ScheduleConfig, Verdict, WRITE_BACK_RACE,
};
use leasefs::types::CacheMode;
use rand::SeedableRng;

const MODES: [CacheMode; 3] = [CacheMode::WriteBackLease, CacheMode::WriteThroughOcc, CacheMode::WriteBackUnsafe];

pub fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().skip(1).find(|a| a.ends_with(".scn")) {
        Some(path) => std::fs::read_to_string(path)?,
        None => WRITE_BACK_RACE.to_string(),
    };
    let scenario = parse_scenario(&text)?;
    print!("scenario:\n{scenario}");
    for mode in MODES {
        let trace = scheduled_interleave(&scenario, &ScheduleConfig::new(mode))?;
        match check_linearizable(&trace.ops)? {
            Verdict::Pass => println!("{mode:>16}: linearizable"),
            Verdict::Violation { read } => println!("{mode:>16}: violation, read {read:?}"),
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let spec = RandomSpec::default();
    for mode in MODES {
        let (mut flagged, mut ledger_bad) = (0, 0);
        for _ in 0..50 {
            let s = random_scenario(&mut rng, &spec);
            let t = scheduled_interleave(&s, &ScheduleConfig::new(mode))?;
            if !check_linearizable(&t.ops)?.is_pass() {
                flagged += 1;
            }
            if !check_lease_ledger(&t.grant_log)?.is_pass() {
                ledger_bad += 1;
            }
        }
        println!("{mode:>16}: {flagged}/50 random scenarios flagged, {ledger_bad} bad ledgers");
    }
    Ok(())
}
