//! Per-page linearizability of read/write register histories.
//!
//! Depth-first search over linearization prefixes: an operation may come
//! next once nothing still unplaced finished before it started. A read may
//! only be placed while the register holds its digest. Failed
//! `(placed set, value)` states are memoized.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use super::history::{OpKind, OpRecord};
use crate::types::{zero_page_digest, Gfi};

/// Largest per-page history the search accepts.
pub const H_MAX: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("{ops} operations on page {page} of {gfi}, more than {H_MAX}")]
    HistoryTooLarge { gfi: Gfi, page: u64, ops: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// No valid order exists; `read` is a read that cannot be placed.
    Violation { read: OpRecord },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Checks every `(gfi, page)` register of `history` independently. Each
/// register starts out as the zero page.
pub fn check_linearizable(history: &[OpRecord]) -> Result<Verdict, CheckError> {
    let mut pages: BTreeMap<(Gfi, u64), Vec<OpRecord>> = BTreeMap::new();
    for op in history {
        pages.entry((op.gfi, op.page)).or_default().push(*op);
    }
    for ((gfi, page), ops) in &pages {
        if ops.len() > H_MAX {
            return Err(CheckError::HistoryTooLarge {
                gfi: *gfi,
                page: *page,
                ops: ops.len(),
            });
        }
    }
    for ops in pages.values() {
        let v = check_register(ops, zero_page_digest());
        if !v.is_pass() {
            return Ok(v);
        }
    }
    Ok(Verdict::Pass)
}

/// Checks one register history (at most 32 operations) starting from
/// `initial`.
pub fn check_register(ops: &[OpRecord], initial: u64) -> Verdict {
    assert!(ops.len() <= 32, "register history too long for the search");
    let mut s = Search {
        ops,
        full: if ops.is_empty() { 0 } else { u32::MAX >> (32 - ops.len()) },
        failed: HashSet::new(),
        deepest: (0, 0, initial),
    };
    if s.run(0, initial) {
        return Verdict::Pass;
    }
    let (_, mask, value) = s.deepest;
    let read = s
        .minimal(mask)
        .filter(|&i| ops[i].kind == OpKind::Read && ops[i].digest != value)
        .min_by_key(|&i| ops[i].invoke)
        .map(|i| ops[i])
        .expect("a stuck search leaves an unplaceable read");
    Verdict::Violation { read }
}

struct Search<'a> {
    ops: &'a [OpRecord],
    full: u32,
    failed: HashSet<(u32, u64)>,
    deepest: (u32, u32, u64),
}

impl Search<'_> {
    fn minimal(&self, mask: u32) -> impl Iterator<Item = usize> + '_ {
        let n = self.ops.len();
        (0..n).filter(move |&i| {
            mask & (1 << i) == 0
                && !(0..n).any(|j| j != i && mask & (1 << j) == 0 && self.ops[j].precedes(&self.ops[i]))
        })
    }

    fn run(&mut self, mask: u32, value: u64) -> bool {
        if mask == self.full {
            return true;
        }
        if self.failed.contains(&(mask, value)) {
            return false;
        }
        let depth = mask.count_ones();
        if depth > self.deepest.0 {
            self.deepest = (depth, mask, value);
        }
        let next: Vec<usize> = self.minimal(mask).collect();
        for i in next {
            let op = self.ops[i];
            let placed = match op.kind {
                OpKind::Write => self.run(mask | 1 << i, op.digest),
                OpKind::Read if op.digest == value => self.run(mask | 1 << i, value),
                OpKind::Read => false,
            };
            if placed {
                return true;
            }
        }
        self.failed.insert((mask, value));
        false
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::types::{NodeId, PageData};
    use proptest::prelude::*;

    const G: Gfi = Gfi::new(0, 1);

    pub(crate) fn op(kind: OpKind, node: u32, digest: u64, invoke: u64, respond: u64) -> OpRecord {
        OpRecord {
            node: NodeId(node),
            kind,
            gfi: G,
            page: 0,
            digest,
            invoke,
            respond,
        }
    }

    fn d(label: u64) -> u64 {
        PageData::patterned(label).digest()
    }

    /// Every permutation consistent with real time, replayed against a
    /// register.
    fn brute_force(ops: &[OpRecord], initial: u64) -> bool {
        fn perms(rest: &mut Vec<usize>, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if rest.is_empty() {
                out.push(acc.clone());
                return;
            }
            for k in 0..rest.len() {
                let x = rest.remove(k);
                acc.push(x);
                perms(rest, acc, out);
                acc.pop();
                rest.insert(k, x);
            }
        }
        let mut all = Vec::new();
        perms(&mut (0..ops.len()).collect(), &mut Vec::new(), &mut all);
        all.iter().any(|order| {
            let respects_time = order
                .iter()
                .enumerate()
                .all(|(p, &i)| order[p + 1..].iter().all(|&j| !ops[j].precedes(&ops[i])));
            let mut value = initial;
            let legal = order.iter().all(|&i| match ops[i].kind {
                OpKind::Write => {
                    value = ops[i].digest;
                    true
                }
                OpKind::Read => ops[i].digest == value,
            });
            respects_time && legal
        })
    }

    #[test]
    fn sequential_write_then_read_passes() {
        let h = [op(OpKind::Write, 1, d(1), 1, 2), op(OpKind::Read, 2, d(1), 3, 4)];
        assert!(check_linearizable(&h).unwrap().is_pass());
    }

    #[test]
    fn stale_read_is_cited() {
        let stale = op(OpKind::Read, 2, zero_page_digest(), 3, 4);
        let h = [op(OpKind::Write, 1, d(1), 1, 2), stale];
        assert_eq!(check_linearizable(&h).unwrap(), Verdict::Violation { read: stale });
    }

    #[test]
    fn overlapping_writes_either_order() {
        let wa = op(OpKind::Write, 1, d(1), 1, 4);
        let wb = op(OpKind::Write, 2, d(2), 2, 5);
        for winner in [d(1), d(2)] {
            let h = [wa, wb, op(OpKind::Read, 3, winner, 6, 7), op(OpKind::Read, 3, winner, 8, 9)];
            assert!(check_linearizable(&h).unwrap().is_pass());
        }
        let h = [
            wa,
            wb,
            op(OpKind::Read, 3, d(1), 6, 7),
            op(OpKind::Read, 3, d(2), 8, 9),
            op(OpKind::Read, 3, d(1), 10, 11),
        ];
        assert!(!check_linearizable(&h).unwrap().is_pass());
    }

    #[test]
    fn read_concurrent_with_write_may_see_either() {
        let w = op(OpKind::Write, 1, d(1), 1, 10);
        for seen in [zero_page_digest(), d(1)] {
            assert!(check_linearizable(&[w, op(OpKind::Read, 2, seen, 2, 3)]).unwrap().is_pass());
        }
    }

    #[test]
    fn pages_are_independent_registers() {
        let mut w = op(OpKind::Write, 1, d(1), 1, 2);
        w.page = 1;
        let r = op(OpKind::Read, 2, zero_page_digest(), 3, 4);
        assert!(check_linearizable(&[w, r]).unwrap().is_pass());
    }

    #[test]
    fn oversized_history_is_refused() {
        let h: Vec<OpRecord> = (0..21).map(|i| op(OpKind::Write, 1, d(i), 2 * i + 1, 2 * i + 2)).collect();
        assert!(matches!(check_linearizable(&h), Err(CheckError::HistoryTooLarge { ops: 21, .. })));
        assert!(check_linearizable(&h[..20]).unwrap().is_pass());
    }

    #[test]
    fn empty_history_passes() {
        assert!(check_linearizable(&[]).unwrap().is_pass());
    }

    /// Every history of up to three operations over two values and a small
    /// set of interval shapes.
    #[test]
    fn agrees_with_brute_force_on_all_small_histories() {
        let intervals = [(1, 2), (3, 4), (5, 6), (1, 4), (2, 5), (3, 6), (1, 6)];
        let kinds = [
            (OpKind::Write, d(1)),
            (OpKind::Write, d(2)),
            (OpKind::Read, zero_page_digest()),
            (OpKind::Read, d(1)),
            (OpKind::Read, d(2)),
        ];
        let mut cases = 0;
        for n in 0..=3usize {
            let choices = (intervals.len() * kinds.len()).pow(n as u32);
            for mut c in 0..choices {
                let mut h = Vec::new();
                for k in 0..n {
                    let pick = c % (intervals.len() * kinds.len());
                    c /= intervals.len() * kinds.len();
                    let (iv, kd) = (intervals[pick % intervals.len()], kinds[pick / intervals.len()]);
                    h.push(op(kd.0, k as u32 + 1, kd.1, iv.0, iv.1));
                }
                let expected = brute_force(&h, zero_page_digest());
                assert_eq!(check_register(&h, zero_page_digest()).is_pass(), expected, "{h:?}");
                cases += 1;
            }
        }
        assert!(cases > 40_000);
    }

    fn history() -> impl Strategy<Value = Vec<OpRecord>> {
        prop::collection::vec((any::<bool>(), 0u64..3, 0u64..12, 1u64..6), 0..7).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (w, label, start, len))| {
                    let digest = if label == 0 { zero_page_digest() } else { d(label) };
                    let kind = if w && label != 0 { OpKind::Write } else { OpKind::Read };
                    op(kind, i as u32, digest, start * 2, start * 2 + len * 2 - 1)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force_on_random_histories(h in history()) {
            prop_assert_eq!(check_register(&h, zero_page_digest()).is_pass(), brute_force(&h, zero_page_digest()));
        }
    }
}
