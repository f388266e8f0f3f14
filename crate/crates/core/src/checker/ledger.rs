//! Replays the manager's grant log into per-file lease intervals and checks
//! that writers are exclusive.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::manager::{GrantLogEntry, LogEvent};
use crate::types::{Gfi, LeaseType, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("malformed grant log at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
}

/// One node's tenure of a lease.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub gfi: Gfi,
    pub node: NodeId,
    pub lease: LeaseType,
    pub grant_seq: u64,
    /// `None` while still held at the end of the log.
    pub release_seq: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LeaseLedger {
    pub intervals: Vec<Interval>,
}

impl LeaseLedger {
    pub fn for_file(&self, gfi: Gfi) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(move |i| i.gfi == gfi)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LedgerVerdict {
    Pass(LeaseLedger),
    /// The grant at `seq` overlaps an incompatible interval.
    Violation { seq: u64, gfi: Gfi, reason: String },
}

impl LedgerVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, LedgerVerdict::Pass(_))
    }
}

/// Parses and checks a grant-log dump.
pub fn check_lease_ledger(dump: &str) -> Result<LedgerVerdict, LedgerError> {
    let mut entries = Vec::new();
    for (n, line) in dump.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: GrantLogEntry = line.parse().map_err(|_| LedgerError::MalformedLog {
            line: n + 1,
            reason: format!("cannot parse {line:?}"),
        })?;
        entries.push((n + 1, e));
    }
    check_entries(&entries)
}

/// Checks already-parsed entries; each is paired with its line number.
pub fn check_entries(entries: &[(usize, GrantLogEntry)]) -> Result<LedgerVerdict, LedgerError> {
    let mut open: HashMap<Gfi, BTreeMap<NodeId, usize>> = HashMap::new();
    let mut ledger = LeaseLedger::default();
    let mut expected_seq = 1;
    for &(line, e) in entries {
        if e.seq != expected_seq {
            return Err(LedgerError::MalformedLog {
                line,
                reason: format!("sequence {} where {} was due", e.seq, expected_seq),
            });
        }
        expected_seq += 1;
        let held = open.entry(e.gfi).or_default();
        match e.event {
            LogEvent::Grant => {
                if e.lease == LeaseType::Null {
                    return Err(LedgerError::MalformedLog {
                        line,
                        reason: "null lease granted".into(),
                    });
                }
                // a repeated grant to a current owner replaces its tenure
                if let Some(k) = held.remove(&e.node) {
                    ledger.intervals[k].release_seq = Some(e.seq);
                }
                let conflict = held.iter().find(|(_, &k)| {
                    let other = ledger.intervals[k].lease;
                    e.lease == LeaseType::Write || other == LeaseType::Write
                });
                if let Some((&other, &k)) = conflict {
                    return Ok(LedgerVerdict::Violation {
                        seq: e.seq,
                        gfi: e.gfi,
                        reason: format!(
                            "{} to {} while {} holds {}",
                            e.lease, e.node, other, ledger.intervals[k].lease
                        ),
                    });
                }
                held.insert(e.node, ledger.intervals.len());
                ledger.intervals.push(Interval {
                    gfi: e.gfi,
                    node: e.node,
                    lease: e.lease,
                    grant_seq: e.seq,
                    release_seq: None,
                });
            }
            LogEvent::Revoke | LogEvent::Remove => match held.remove(&e.node) {
                Some(k) => ledger.intervals[k].release_seq = Some(e.seq),
                None => {
                    return Err(LedgerError::MalformedLog {
                        line,
                        reason: format!("{} releases {} it does not hold", e.node, e.gfi),
                    })
                }
            },
        }
    }
    Ok(LedgerVerdict::Pass(ledger))
}
