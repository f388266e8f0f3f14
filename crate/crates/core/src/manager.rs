//! The lease manager: one FIFO-serialized state machine per file plus a
//! global, gap-free grant log.
//!
//! Transition rule for a request `(intent, node)` against the current
//! `(type, owners)`:
//!
//! | current           | intent | action                                   |
//! |-------------------|--------|------------------------------------------|
//! | no owners         | any    | grant                                    |
//! | Read              | Read   | add owner                                |
//! | Read              | Write  | revoke every owner, then grant Write     |
//! | Write             | any    | revoke the owner, then grant the intent  |
//!
//! The requester itself is revoked like any other owner.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::transport::{Endpoint, Service};
use crate::types::{Gfi, Intent, LeaseType, NodeId, ParseError};
use crate::wire::{ErrorCode, WireMessage};

pub const RETRY_LIMIT: u32 = 3;
pub const RETRY_BACKOFF: Duration = Duration::from_millis(100);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LogEvent {
    Grant,
    Revoke,
    Remove,
}

impl LogEvent {
    pub fn name(self) -> &'static str {
        match self {
            LogEvent::Grant => "grant",
            LogEvent::Revoke => "revoke",
            LogEvent::Remove => "remove",
        }
    }
}

/// One line of the grant log: `seq event gfi node lease_type`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrantLogEntry {
    pub seq: u64,
    pub event: LogEvent,
    pub gfi: Gfi,
    pub node: NodeId,
    /// Granted type for grants; type given up for revokes and removes.
    pub lease: LeaseType,
}

impl fmt::Display for GrantLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.seq,
            self.event.name(),
            self.gfi,
            self.node,
            self.lease
        )
    }
}

impl FromStr for GrantLogEntry {
    type Err = ParseError;

    fn from_str(line: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || ParseError(line.to_string());
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let event = match f[1] {
            "grant" => LogEvent::Grant,
            "revoke" => LogEvent::Revoke,
            "remove" => LogEvent::Remove,
            _ => return Err(bad()),
        };
        Ok(GrantLogEntry {
            seq: f[0].parse().map_err(|_| bad())?,
            event,
            gfi: f[2].parse()?,
            node: NodeId(f[3].parse().map_err(|_| bad())?),
            lease: f[4].parse()?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ManagerConfig {
    /// Retries after the first failed revocation attempt.
    pub retry_limit: u32,
    /// Pause before the first retry; doubles each time.
    pub backoff: Duration,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            retry_limit: RETRY_LIMIT,
            backoff: RETRY_BACKOFF,
        }
    }
}

#[derive(Debug, Default)]
pub struct ManagerStats {
    pub grants: AtomicU64,
    pub revokes_sent: AtomicU64,
    pub revoke_failures: AtomicU64,
}

#[derive(Default)]
struct SlotState {
    ty: LeaseType,
    /// Owner to the epoch of its grant.
    owners: BTreeMap<NodeId, u64>,
    queue: VecDeque<u64>,
    next_ticket: u64,
    busy: bool,
}

#[derive(Default)]
struct Slot {
    st: Mutex<SlotState>,
    cv: Condvar,
}

pub struct Manager {
    cfg: ManagerConfig,
    slots: Mutex<HashMap<Gfi, Arc<Slot>>>,
    log: Mutex<Vec<GrantLogEntry>>,
    nodes: RwLock<HashMap<NodeId, Arc<dyn Endpoint>>>,
    next_req: AtomicU64,
    stats: ManagerStats,
}

impl Manager {
    pub fn new(cfg: ManagerConfig) -> Arc<Self> {
        Arc::new(Manager {
            cfg,
            slots: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            nodes: RwLock::new(HashMap::new()),
            next_req: AtomicU64::new(1),
            stats: ManagerStats::default(),
        })
    }

    pub fn stats(&self) -> &ManagerStats {
        &self.stats
    }

    /// Where revocations for `node` are sent.
    pub fn register_node(&self, node: NodeId, endpoint: Arc<dyn Endpoint>) {
        self.nodes.write().insert(node, endpoint);
    }

    pub fn is_registered(&self, node: NodeId) -> bool {
        self.nodes.read().contains_key(&node)
    }

    fn slot(&self, gfi: Gfi) -> Arc<Slot> {
        self.slots.lock().entry(gfi).or_default().clone()
    }

    /// Current `(type, owners)` of `gfi`.
    pub fn lease_state(&self, gfi: Gfi) -> (LeaseType, Vec<NodeId>) {
        let slot = self.slot(gfi);
        let st = slot.st.lock();
        (st.ty, st.owners.keys().copied().collect())
    }

    pub fn log(&self) -> Vec<GrantLogEntry> {
        self.log.lock().clone()
    }

    /// The grant log as line-delimited text.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.log.lock().iter() {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    fn append(&self, event: LogEvent, gfi: Gfi, node: NodeId, lease: LeaseType) -> u64 {
        let mut log = self.log.lock();
        let seq = log.len() as u64 + 1;
        log.push(GrantLogEntry {
            seq,
            event,
            gfi,
            node,
            lease,
        });
        seq
    }

    /// Blocks until the request reaches the head of `gfi`'s queue, runs the
    /// transition, and returns the grant's epoch.
    pub fn grant_lease(&self, gfi: Gfi, intent: Intent, node: NodeId) -> Result<u64> {
        let slot = self.slot(gfi);
        let mut st = slot.st.lock();
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.queue.push_back(ticket);
        while st.busy || st.queue.front() != Some(&ticket) {
            slot.cv.wait(&mut st);
        }
        st.queue.pop_front();
        st.busy = true;

        let must_revoke = !st.owners.is_empty()
            && match (st.ty, intent) {
                (LeaseType::Read, Intent::Read) => false,
                (LeaseType::Read, Intent::Write) | (LeaseType::Write, _) => true,
                (LeaseType::Null, _) => false,
            };
        if must_revoke {
            let held = st.ty;
            let targets: Vec<(NodeId, u64)> = st.owners.iter().map(|(&n, &e)| (n, e)).collect();
            drop(st);
            let outcomes = self.revoke_all(gfi, &targets);
            st = slot.st.lock();
            let mut failed = false;
            for ((owner, epoch), ok) in targets.into_iter().zip(outcomes) {
                if !ok {
                    failed = true;
                    continue;
                }
                if st.owners.get(&owner) == Some(&epoch) {
                    st.owners.remove(&owner);
                    self.append(LogEvent::Revoke, gfi, owner, held);
                }
            }
            if st.owners.is_empty() {
                st.ty = LeaseType::Null;
            }
            if failed {
                self.stats.revoke_failures.fetch_add(1, Ordering::Relaxed);
                st.busy = false;
                slot.cv.notify_all();
                return Err(Error::RevokeFailed(gfi));
            }
        }
        if st.owners.is_empty() {
            st.ty = intent.lease();
        }
        let epoch = self.append(LogEvent::Grant, gfi, node, st.ty);
        st.owners.insert(node, epoch);
        st.busy = false;
        slot.cv.notify_all();
        self.stats.grants.fetch_add(1, Ordering::Relaxed);
        Ok(epoch)
    }

    /// Drops `node` from the owners of `gfi`. Applied immediately, even while
    /// a grant for the file is waiting on revocations.
    pub fn remove_owner(&self, gfi: Gfi, node: NodeId) {
        let slot = self.slot(gfi);
        let mut st = slot.st.lock();
        if st.owners.remove(&node).is_some() {
            let ty = st.ty;
            self.append(LogEvent::Remove, gfi, node, ty);
            if st.owners.is_empty() {
                st.ty = LeaseType::Null;
            }
        }
    }

    fn revoke_all(&self, gfi: Gfi, targets: &[(NodeId, u64)]) -> Vec<bool> {
        if let [(node, epoch)] = targets {
            return vec![self.revoke_owner(gfi, *node, *epoch)];
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = targets
                .iter()
                .map(|&(node, epoch)| s.spawn(move || self.revoke_owner(gfi, node, epoch)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or(false)).collect()
        })
    }

    /// Sends Revoke until it succeeds or the retries run out.
    pub fn revoke_owner(&self, gfi: Gfi, node: NodeId, epoch: u64) -> bool {
        let Some(ep) = self.nodes.read().get(&node).cloned() else {
            tracing::warn!(%node, "revocation for an unregistered node");
            return false;
        };
        let mut backoff = self.cfg.backoff;
        for attempt in 0..=self.cfg.retry_limit {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            self.stats.revokes_sent.fetch_add(1, Ordering::Relaxed);
            let req = self.next_req.fetch_add(1, Ordering::Relaxed);
            match ep.call(WireMessage::Revoke { req, gfi, epoch }) {
                Ok(WireMessage::RevokeReply { ok: true, .. }) => return true,
                Ok(reply) => tracing::debug!(%node, tag = reply.tag(), "revocation refused"),
                Err(e) => tracing::debug!(%node, error = %e, "revocation undeliverable"),
            }
        }
        false
    }
}

impl Service for Manager {
    fn handle(&self, msg: WireMessage) -> WireMessage {
        match msg {
            WireMessage::GrantLease { req, gfi, intent, node } => match self.grant_lease(gfi, intent, node) {
                Ok(epoch) => WireMessage::GrantLeaseReply { req, epoch },
                Err(e) => WireMessage::error(req, e.code(), e.to_string()),
            },
            WireMessage::RemoveOwner { req, gfi, node } => {
                self.remove_owner(gfi, node);
                WireMessage::RemoveOwnerReply { req }
            }
            other => WireMessage::error(
                other.req(),
                ErrorCode::BadRequest,
                format!("manager cannot serve tag {}", other.tag()),
            ),
        }
    }
}
