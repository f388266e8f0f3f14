//! Consistency checking: operation histories, per-page linearizability,
//! the lease ledger, and the barrier scheduler that drives scripted
//! interleavings.

pub mod history;
pub mod ledger;
pub mod linearize;
pub mod scenario;

pub use history::{now, History, OpKind, OpRecord};
pub use ledger::{check_lease_ledger, Interval, LeaseLedger, LedgerError, LedgerVerdict};
pub use linearize::{check_linearizable, check_register, CheckError, Verdict, H_MAX};
pub use scenario::{
    parse_scenario, random_race_scenario, random_scenario, scheduled_interleave, RandomSpec, Scenario,
    ScenarioError, ScheduleConfig, Trace, WRITE_BACK_RACE,
};
