//! Operation histories with a single process-wide clock.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::error::Result;
use crate::types::{Gfi, NodeId, PageData};

static CLOCK: AtomicU64 = AtomicU64::new(1);

/// Next tick of the test clock. Strictly increasing across all threads.
pub fn now() -> u64 {
    CLOCK.fetch_add(1, Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub node: NodeId,
    pub kind: OpKind,
    pub gfi: Gfi,
    pub page: u64,
    /// Digest of the page written, or of the page a read returned.
    pub digest: u64,
    pub invoke: u64,
    pub respond: u64,
}

impl OpRecord {
    /// True when `self` finished before `other` started.
    pub fn precedes(&self, other: &OpRecord) -> bool {
        self.respond < other.invoke
    }
}

/// Thread-safe collector of completed operations. Failed operations are
/// left out.
#[derive(Default)]
pub struct History {
    ops: Mutex<Vec<OpRecord>>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, node: NodeId, gfi: Gfi, page: u64, op: impl FnOnce() -> Result<PageData>) -> Result<PageData> {
        let invoke = now();
        let data = op()?;
        let respond = now();
        self.push(OpRecord {
            node,
            kind: OpKind::Read,
            gfi,
            page,
            digest: data.digest(),
            invoke,
            respond,
        });
        Ok(data)
    }

    pub fn write(&self, node: NodeId, gfi: Gfi, page: u64, data: &PageData, op: impl FnOnce() -> Result<()>) -> Result<()> {
        let invoke = now();
        op()?;
        let respond = now();
        self.push(OpRecord {
            node,
            kind: OpKind::Write,
            gfi,
            page,
            digest: data.digest(),
            invoke,
            respond,
        });
        Ok(())
    }

    pub fn push(&self, op: OpRecord) {
        debug_assert!(op.invoke < op.respond);
        self.ops.lock().push(op);
    }

    pub fn ops(&self) -> Vec<OpRecord> {
        let mut v = self.ops.lock().clone();
        v.sort_by_key(|o| o.invoke);
        v
    }

    pub fn len(&self) -> usize {
        self.ops.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
