//! The per-node userspace daemon: buffer cache, batched storage I/O, the
//! client side of the lease protocol, and revocation handling.
//!
//! Latch order: kernel-cache guards may be held when the daemon is entered;
//! the daemon never calls into the kernel cache while holding its own
//! buffer-cache latch.

pub mod buffer;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::kcache::{EpochGate, KernelCache, Patience, Upcalls, DEFAULT_SOFT_TIMEOUT, EPOCH_WAIT_LIMIT};
use crate::lockorder::{DeadlockAbort, LockClass, LockConfig, TrackedMutex, TrackedRwLock};
use crate::probe::Probes;
use crate::storage::StorageClient;
use crate::transport::{Endpoint, Service};
use crate::types::{lease_satisfies, CacheMode, Gfi, Intent, LeaseType, NodeId, PageData};
use crate::wire::{ErrorCode, WireMessage};

use buffer::{union_pages, BufferCache};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1 << 30;
pub const DEFAULT_READAHEAD: u64 = 8;
pub const OCC_RETRY_CAP: u32 = 64;

#[derive(Clone, Copy, Debug)]
pub struct DaemonConfig {
    pub mode: CacheMode,
    pub buffer_capacity: usize,
    pub readahead: u64,
    pub soft_timeout: Duration,
    /// Pause between attempts to reach an unresponsive manager.
    pub manager_retry: Duration,
    pub occ_retry_cap: u32,
    /// Revoke by taking the daemon lease guard before invalidating kernel
    /// pages. Deadlock-prone; exists to demonstrate the cycle.
    pub naive_revoke: bool,
    pub locks: LockConfig,
}

impl DaemonConfig {
    pub fn new(mode: CacheMode) -> Self {
        DaemonConfig {
            mode,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            readahead: DEFAULT_READAHEAD,
            soft_timeout: DEFAULT_SOFT_TIMEOUT,
            manager_retry: Duration::from_millis(20),
            occ_retry_cap: OCC_RETRY_CAP,
            naive_revoke: false,
            locks: LockConfig::default(),
        }
    }
}

#[derive(Debug, Default)]
pub struct DaemonStats {
    pub grant_requests: AtomicU64,
    pub remove_owner_requests: AtomicU64,
    pub revokes_handled: AtomicU64,
    pub revokes_failed: AtomicU64,
    pub occ_aborts: AtomicU64,
    pub occ_passes: AtomicU64,
    pub occ_livelocks: AtomicU64,
    pub storage_reads: AtomicU64,
    pub storage_writes: AtomicU64,
}

/// Daemon-side lease record of the write-through mode.
struct OccLease {
    gate: TrackedMutex<()>,
    state: TrackedRwLock<OccState>,
    /// Bumped under the shared guard by every write-through and every
    /// checked fill.
    version: AtomicU64,
    epochs: EpochGate,
}

#[derive(Clone, Copy)]
struct OccState {
    ty: LeaseType,
    epoch: u64,
}

/// A lease-table row: last grant and when it happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrantRecord {
    pub lease: LeaseType,
    pub granted_at: Instant,
}

pub struct Daemon {
    node: NodeId,
    cfg: DaemonConfig,
    kc: Weak<KernelCache>,
    bc: Mutex<BufferCache>,
    storage: Arc<StorageClient>,
    manager: Arc<dyn Endpoint>,
    table: Mutex<HashMap<Gfi, GrantRecord>>,
    occ: RwLock<HashMap<Gfi, Arc<OccLease>>>,
    last_miss: Mutex<HashMap<Gfi, u64>>,
    next_req: AtomicU64,
    probes: Arc<Probes>,
    stats: DaemonStats,
}

impl Daemon {
    pub fn new(
        node: NodeId,
        cfg: DaemonConfig,
        kc: &Arc<KernelCache>,
        storage: Arc<StorageClient>,
        manager: Arc<dyn Endpoint>,
        probes: Arc<Probes>,
    ) -> Arc<Self> {
        Arc::new(Daemon {
            node,
            cfg,
            kc: Arc::downgrade(kc),
            bc: Mutex::new(BufferCache::new(cfg.buffer_capacity)),
            storage,
            manager,
            table: Mutex::new(HashMap::new()),
            occ: RwLock::new(HashMap::new()),
            last_miss: Mutex::new(HashMap::new()),
            next_req: AtomicU64::new(1),
            probes,
            stats: DaemonStats::default(),
        })
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn stats(&self) -> &DaemonStats {
        &self.stats
    }

    pub fn storage(&self) -> &Arc<StorageClient> {
        &self.storage
    }

    /// Runs `f` with the buffer cache latched.
    pub fn with_buffer<R>(&self, f: impl FnOnce(&mut BufferCache) -> R) -> R {
        f(&mut self.bc.lock())
    }

    pub fn lease_table(&self) -> HashMap<Gfi, GrantRecord> {
        self.table.lock().clone()
    }

    /// Daemon-side lease of the write-through mode.
    pub fn occ_lease(&self, gfi: Gfi) -> LeaseType {
        self.occ
            .read()
            .get(&gfi)
            .map(|o| o.state.read().ty)
            .unwrap_or_default()
    }

    fn kc(&self) -> Result<Arc<KernelCache>> {
        self.kc
            .upgrade()
            .ok_or_else(|| Error::Protocol("kernel cache is gone".into()))
    }

    fn occ_entry(&self, gfi: Gfi) -> Arc<OccLease> {
        if let Some(o) = self.occ.read().get(&gfi) {
            return o.clone();
        }
        self.occ
            .write()
            .entry(gfi)
            .or_insert_with(|| {
                Arc::new(OccLease {
                    gate: TrackedMutex::new((), gfi, LockClass::AcquireGate, self.cfg.locks),
                    state: TrackedRwLock::new(
                        OccState {
                            ty: LeaseType::Null,
                            epoch: 0,
                        },
                        gfi,
                        LockClass::OccGuard,
                        self.cfg.locks,
                    ),
                    version: AtomicU64::new(0),
                    epochs: EpochGate::default(),
                })
            })
            .clone()
    }

    fn req(&self) -> u64 {
        self.next_req.fetch_add(1, Ordering::Relaxed)
    }

    /// Calls the manager until it answers, or until `soft_timeout` for
    /// `Patience::Wait`.
    fn manager_call(&self, patience: Patience, build: impl Fn(u64) -> WireMessage) -> Result<WireMessage> {
        let deadline = Instant::now() + self.cfg.soft_timeout;
        loop {
            match self.manager.call(build(self.req())) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    tracing::debug!(node = %self.node, error = %e, "manager call failed");
                    if patience == Patience::Once || Instant::now() >= deadline {
                        return Err(Error::ManagerUnreachable);
                    }
                    std::thread::sleep(self.cfg.manager_retry);
                }
            }
        }
    }

    fn grant(&self, gfi: Gfi, want: LeaseType, patience: Patience) -> Result<u64> {
        let intent = Intent::from_lease(want).ok_or(Error::Protocol("null lease requested".into()))?;
        self.stats.grant_requests.fetch_add(1, Ordering::Relaxed);
        let node = self.node;
        match self.manager_call(patience, |req| WireMessage::GrantLease { req, gfi, intent, node })? {
            WireMessage::GrantLeaseReply { epoch, .. } => {
                self.table.lock().insert(
                    gfi,
                    GrantRecord {
                        lease: want,
                        granted_at: Instant::now(),
                    },
                );
                Ok(epoch)
            }
            WireMessage::Error {
                code: ErrorCode::RevokeFailed,
                ..
            } => Err(Error::LeaseUnavailable(gfi)),
            other => Err(Error::Protocol(format!("grant answered with tag {}", other.tag()))),
        }
    }

    fn remove_owner(&self, gfi: Gfi, patience: Patience) -> Result<()> {
        self.stats.remove_owner_requests.fetch_add(1, Ordering::Relaxed);
        let node = self.node;
        self.table.lock().remove(&gfi);
        match self.manager_call(patience, |req| WireMessage::RemoveOwner { req, gfi, node })? {
            WireMessage::RemoveOwnerReply { .. } => Ok(()),
            other => Err(Error::Protocol(format!("remove answered with tag {}", other.tag()))),
        }
    }

    fn write_storage(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
        if pages.is_empty() {
            return Ok(());
        }
        self.stats.storage_writes.fetch_add(1, Ordering::Relaxed);
        self.storage.write_pages(gfi, pages)
    }

    /// Writes `newer` together with the buffer's dirty pages of `gfi` as one
    /// batch; the buffer copies are marked clean afterwards.
    fn flush_union(&self, gfi: Gfi, newer: Vec<(u64, PageData)>) -> Result<Vec<(u64, PageData)>> {
        let buffered = self.bc.lock().dirty_pages(gfi);
        let batch = union_pages(newer, buffered.clone());
        self.write_storage(gfi, &batch)?;
        self.bc.lock().mark_clean(gfi, &buffered);
        Ok(batch)
    }

    /// Flushes and forgets every buffered page of `gfi`.
    fn flush_and_drop(&self, gfi: Gfi, newer: Vec<(u64, PageData)>) -> Result<()> {
        self.flush_union(gfi, newer)?;
        let leftover = self.bc.lock().drop_file(gfi);
        // pages dirtied between the flush and the drop
        self.write_storage(gfi, &leftover)
    }

    fn handle_revoke(&self, gfi: Gfi, epoch: u64) -> Result<()> {
        self.stats.revokes_handled.fetch_add(1, Ordering::Relaxed);
        match self.cfg.mode {
            CacheMode::WriteThroughOcc => self.occ_revoke(gfi, epoch),
            _ => {
                let kc = self.kc()?;
                let mut flushed_with_kernel = false;
                let released = kc.release_dist_lease(gfi, epoch, &mut |dirty| {
                    self.flush_and_drop(gfi, dirty)?;
                    flushed_with_kernel = true;
                    Ok(())
                })?;
                if released && !flushed_with_kernel {
                    self.flush_and_drop(gfi, Vec::new())?;
                }
                if released {
                    self.table.lock().remove(&gfi);
                }
                Ok(())
            }
        }
    }

    /// Revocation for the write-through mode.
    pub fn occ_revoke(&self, gfi: Gfi, epoch: u64) -> Result<()> {
        if self.cfg.mode != CacheMode::WriteThroughOcc {
            return Err(Error::ModeMismatch);
        }
        let kc = self.kc()?;
        let occ = self.occ_entry(gfi);
        occ.epochs.wait_for(epoch, EPOCH_WAIT_LIMIT);
        if self.cfg.naive_revoke {
            let mut st = occ.state.write();
            if st.epoch > epoch {
                return Ok(());
            }
            self.probes.hit("revoke.before_invalidate");
            kc.invalidate(gfi);
            self.flush_and_drop(gfi, Vec::new())?;
            st.ty = LeaseType::Null;
            self.table.lock().remove(&gfi);
            return Ok(());
        }
        for _ in 0..=self.cfg.occ_retry_cap {
            if occ.state.read().epoch > epoch {
                return Ok(());
            }
            let v0 = occ.version.load(Ordering::Acquire);
            self.probes.hit("revoke.before_invalidate");
            kc.invalidate(gfi);
            self.flush_union(gfi, Vec::new())?;
            let mut st = occ.state.write();
            if occ.version.load(Ordering::Acquire) == v0 {
                st.ty = LeaseType::Null;
                self.flush_and_drop(gfi, Vec::new())?;
                drop(st);
                self.table.lock().remove(&gfi);
                self.stats.occ_passes.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            drop(st);
            self.stats.occ_aborts.fetch_add(1, Ordering::Relaxed);
        }
        self.stats.occ_livelocks.fetch_add(1, Ordering::Relaxed);
        Err(Error::RevokeLivelock {
            gfi,
            retries: self.cfg.occ_retry_cap,
        })
    }

    /// Reads from the buffer cache, or from storage with readahead on
    /// sequential access.
    pub fn read_miss(&self, gfi: Gfi, index: u64) -> Result<PageData> {
        if let Some(p) = self.bc.lock().get(gfi, index) {
            return Ok(p);
        }
        let sequential = {
            let mut last = self.last_miss.lock();
            let seq = index > 0 && last.get(&gfi) == Some(&(index - 1));
            last.insert(gfi, index);
            seq
        };
        let window = if sequential { self.cfg.readahead.max(1) } else { 1 };
        let indices: Vec<u64> = (index..index.saturating_add(window)).collect();
        self.stats.storage_reads.fetch_add(1, Ordering::Relaxed);
        let pages = self.storage.read_pages(gfi, &indices)?;
        let mut bc = self.bc.lock();
        let mut wanted = None;
        for (i, p) in indices.into_iter().zip(pages) {
            if i == index {
                // a resident copy is at least as new as storage
                if let Some(cur) = bc.get(gfi, i) {
                    wanted = Some(cur);
                    continue;
                }
                wanted = Some(p.clone());
                bc.put(gfi, i, p, false, self.storage.as_ref())?;
            } else if bc.put_if_absent(gfi, i, p, self.storage.as_ref()).is_err() {
                break;
            }
        }
        Ok(wanted.expect("requested page is first in the window"))
    }

    /// Moves `pages` into the buffer cache as dirty.
    pub fn write_back(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
        let mut bc = self.bc.lock();
        for (i, p) in pages {
            bc.put(gfi, i, p, true, self.storage.as_ref())?;
        }
        Ok(())
    }

    /// Pushes kernel pages and buffered dirty pages of `gfi` to storage in
    /// one batch, leaving clean copies in the buffer.
    pub fn sync(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
        let batch = self.flush_union(gfi, pages)?;
        let mut bc = self.bc.lock();
        for (i, p) in batch {
            bc.put(gfi, i, p, false, self.storage.as_ref())?;
        }
        Ok(())
    }
}

impl Upcalls for Daemon {
    fn acquire_lease(&self, gfi: Gfi, held: LeaseType, want: LeaseType, patience: Patience) -> Result<u64> {
        if held == LeaseType::Read && want == LeaseType::Write {
            // the kernel already cleared its pages; buffered clean copies go
            // stale once another node may write
            let dirty = self.bc.lock().drop_file(gfi);
            self.write_storage(gfi, &dirty)?;
            self.remove_owner(gfi, patience)?;
        } else if held == LeaseType::Null {
            let dirty = self.bc.lock().drop_file(gfi);
            self.write_storage(gfi, &dirty)?;
        }
        self.grant(gfi, want, patience)
    }

    fn read_miss(&self, gfi: Gfi, index: u64) -> Result<PageData> {
        Daemon::read_miss(self, gfi, index)
    }

    fn write_back(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
        Daemon::write_back(self, gfi, pages)
    }

    fn sync(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
        Daemon::sync(self, gfi, pages)
    }

    fn write_through(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<bool> {
        if self.cfg.mode != CacheMode::WriteThroughOcc {
            return Err(Error::ModeMismatch);
        }
        let occ = self.occ_entry(gfi);
        let st = occ.state.read();
        if st.ty != LeaseType::Write {
            return Ok(false);
        }
        self.bc
            .lock()
            .put(gfi, index, page.clone(), true, self.storage.as_ref())?;
        occ.version.fetch_add(1, Ordering::AcqRel);
        Ok(true)
    }

    fn checked_fill(&self, gfi: Gfi, index: u64) -> Result<Option<PageData>> {
        if self.cfg.mode != CacheMode::WriteThroughOcc {
            return Err(Error::ModeMismatch);
        }
        let occ = self.occ_entry(gfi);
        let st = occ.state.read();
        if st.ty == LeaseType::Null {
            return Ok(None);
        }
        let page = Daemon::read_miss(self, gfi, index)?;
        occ.version.fetch_add(1, Ordering::AcqRel);
        Ok(Some(page))
    }

    fn occ_acquire(&self, gfi: Gfi, intent: Intent) -> Result<()> {
        if self.cfg.mode != CacheMode::WriteThroughOcc {
            return Err(Error::ModeMismatch);
        }
        let occ = self.occ_entry(gfi);
        let _gate = occ.gate.lock();
        let held = {
            let st = occ.state.read();
            if lease_satisfies(st.ty, intent) {
                return Ok(());
            }
            st.ty
        };
        let want = held.max(intent.lease());
        if held == LeaseType::Read {
            occ.state.write().ty = LeaseType::Null;
            self.kc()?.invalidate(gfi);
        }
        let dirty = self.bc.lock().drop_file(gfi);
        self.write_storage(gfi, &dirty)?;
        if held == LeaseType::Read {
            self.remove_owner(gfi, Patience::Wait)?;
        }
        occ.epochs.begin();
        match self.grant(gfi, want, Patience::Wait) {
            Ok(epoch) => {
                let mut st = occ.state.write();
                st.ty = want;
                st.epoch = st.epoch.max(epoch);
                drop(st);
                occ.epochs.finish(Some(epoch));
                Ok(())
            }
            Err(e) => {
                occ.epochs.finish(None);
                Err(e)
            }
        }
    }

    fn direct_read(&self, gfi: Gfi, index: u64) -> Result<PageData> {
        self.stats.storage_reads.fetch_add(1, Ordering::Relaxed);
        Ok(self.storage.read_pages(gfi, &[index])?.remove(0))
    }

    fn direct_write(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<()> {
        self.write_storage(gfi, &[(index, page.clone())])
    }

    fn enter_fallback(&self, gfi: Gfi, dirty: Vec<(u64, PageData)>) -> Result<()> {
        self.flush_and_drop(gfi, dirty)?;
        self.table.lock().remove(&gfi);
        Ok(())
    }
}

impl Service for Daemon {
    fn handle(&self, msg: WireMessage) -> WireMessage {
        match msg {
            WireMessage::Revoke { req, gfi, epoch } => {
                let outcome = catch_unwind(AssertUnwindSafe(|| self.handle_revoke(gfi, epoch)));
                let ok = match outcome {
                    Ok(Ok(())) => true,
                    Ok(Err(e)) => {
                        tracing::warn!(node = %self.node, gfi = %gfi, error = %e, "revocation failed");
                        false
                    }
                    Err(payload) => {
                        if payload.downcast_ref::<DeadlockAbort>().is_none() {
                            std::panic::resume_unwind(payload);
                        }
                        false
                    }
                };
                if !ok {
                    self.stats.revokes_failed.fetch_add(1, Ordering::Relaxed);
                }
                WireMessage::RevokeReply { req, ok }
            }
            other => WireMessage::error(
                other.req(),
                ErrorCode::BadRequest,
                format!("daemon cannot serve tag {}", other.tag()),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, ClusterConfig};
    use crate::wire::{TAG_GRANT_LEASE, TAG_REMOVE_OWNER};

    fn cluster(mode: CacheMode, nodes: usize) -> Cluster {
        let mut cfg = ClusterConfig::new(mode, nodes);
        cfg.client.flusher = false;
        cfg.record_manager_traffic = true;
        cfg.manager.backoff = Duration::from_millis(1);
        Cluster::new(cfg).unwrap()
    }

    fn writes(c: &Cluster) -> (u64, u64) {
        let s = c.storage_node(0).stats();
        (s.write_rpcs.load(Ordering::Relaxed), s.pages_written.load(Ordering::Relaxed))
    }

    #[test]
    fn revoke_flushes_kernel_and_buffer_pages_as_one_batch() {
        let c = cluster(CacheMode::WriteBackLease, 2);
        let a = c.node(1);
        let gfi = a.gfi(a.open("f", true).unwrap()).unwrap();
        a.write_page(gfi, 0, &PageData::patterned(10)).unwrap();
        a.write_page(gfi, 1, &PageData::patterned(11)).unwrap();
        assert_eq!(a.flush_now(), 2);
        assert_eq!(a.daemon().with_buffer(|b| b.is_dirty(gfi, 0)), Some(true));
        // page 1 is rewritten in the kernel, page 2 is kernel-only
        a.write_page(gfi, 1, &PageData::patterned(21)).unwrap();
        a.write_page(gfi, 2, &PageData::patterned(22)).unwrap();
        let before = writes(&c);
        let b = c.node(2);
        b.open("f", false).unwrap();
        assert_eq!(b.read_page(gfi, 1).unwrap(), PageData::patterned(21));
        let after = writes(&c);
        assert_eq!((after.0 - before.0, after.1 - before.1), (1, 3));
        let stored = c.storage_client().read_pages(gfi, &[0, 1, 2]).unwrap();
        assert_eq!(
            stored,
            vec![PageData::patterned(10), PageData::patterned(21), PageData::patterned(22)]
        );
        assert_eq!(a.daemon().with_buffer(|b| b.len()), 0);
        assert_eq!(a.kcache().lease(gfi), LeaseType::Null);
    }

    #[test]
    fn sequential_misses_read_ahead() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        for i in 0..10 {
            n.read_page(gfi, i).unwrap();
        }
        // index 0 alone, then one window of 8 from index 1, then index 9
        assert_eq!(n.stats().storage_reads, 3);
    }

    #[test]
    fn random_misses_read_one_page() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        for i in [5, 1, 9, 3] {
            n.read_page(gfi, i).unwrap();
        }
        assert_eq!(n.stats().storage_reads, 4);
        assert_eq!(n.daemon().with_buffer(|b| b.len()), 4);
    }

    #[test]
    fn fsync_of_eight_dirty_pages_is_one_rpc() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let n = c.node(1);
        let fd = n.open("f", true).unwrap();
        let gfi = n.gfi(fd).unwrap();
        for i in 0..8 {
            n.write_page(gfi, i, &PageData::patterned(i)).unwrap();
        }
        let before = writes(&c);
        n.fsync(fd).unwrap();
        let after = writes(&c);
        assert_eq!((after.0 - before.0, after.1 - before.1), (1, 8));
    }

    #[test]
    fn failed_flush_keeps_lease_and_retry_succeeds() {
        let c = cluster(CacheMode::WriteBackLease, 2);
        let a = c.node(1);
        let gfi = a.gfi(a.open("f", true).unwrap()).unwrap();
        a.write_page(gfi, 0, &PageData::patterned(7)).unwrap();
        c.storage_node(0).fail_next_writes(1);
        let b = c.node(2);
        b.open("f", false).unwrap();
        assert_eq!(b.read_page(gfi, 0).unwrap(), PageData::patterned(7));
        assert_eq!(a.daemon().stats().revokes_failed.load(Ordering::Relaxed), 1);
        assert_eq!(a.stats().revocations, 2);
    }

    #[test]
    fn unrecoverable_flush_makes_the_lease_unavailable() {
        let c = cluster(CacheMode::WriteBackLease, 2);
        let a = c.node(1);
        let gfi = a.gfi(a.open("f", true).unwrap()).unwrap();
        a.write_page(gfi, 0, &PageData::patterned(7)).unwrap();
        c.storage_node(0).fail_next_writes(100);
        let b = c.node(2);
        b.open("f", false).unwrap();
        assert!(matches!(b.read_page(gfi, 0), Err(Error::LeaseUnavailable(_))));
        // the writer kept its lease and its data
        assert_eq!(a.kcache().lease(gfi), LeaseType::Write);
        assert_eq!(a.read_page(gfi, 0).unwrap(), PageData::patterned(7));
        c.storage_node(0).fail_next_writes(0);
        assert_eq!(b.read_page(gfi, 0).unwrap(), PageData::patterned(7));
    }

    #[test]
    fn escalation_removes_ownership_before_asking_for_write() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        n.read_page(gfi, 0).unwrap();
        n.write_page(gfi, 0, &PageData::patterned(1)).unwrap();
        assert_eq!(
            c.manager_traffic(1).tags(),
            vec![TAG_GRANT_LEASE, TAG_REMOVE_OWNER, TAG_GRANT_LEASE]
        );
        assert_eq!(n.kcache().lease(gfi), LeaseType::Write);
    }

    #[test]
    fn stale_revocation_is_acknowledged_without_release() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        n.write_page(gfi, 0, &PageData::patterned(1)).unwrap();
        let epoch = n.kcache().lease_epoch(gfi);
        let reply = n.daemon().handle(WireMessage::Revoke {
            req: 1,
            gfi,
            epoch: epoch - 1,
        });
        assert_eq!(reply, WireMessage::RevokeReply { req: 1, ok: true });
        assert_eq!(n.kcache().lease(gfi), LeaseType::Write);
    }

    #[test]
    fn non_revoke_requests_are_refused() {
        let c = cluster(CacheMode::WriteBackLease, 1);
        let reply = c.node(1).daemon().handle(WireMessage::Resolve {
            req: 4,
            path: "x".into(),
        });
        assert!(matches!(reply, WireMessage::Error { req: 4, code: ErrorCode::BadRequest, .. }));
    }

    #[test]
    fn occ_read_lease_upgrades_through_remove_owner() {
        let c = cluster(CacheMode::WriteThroughOcc, 1);
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        n.read_page(gfi, 0).unwrap();
        assert_eq!(n.lease(gfi), LeaseType::Read);
        n.write_page(gfi, 0, &PageData::patterned(3)).unwrap();
        assert_eq!(n.lease(gfi), LeaseType::Write);
        assert_eq!(
            c.manager_traffic(1).tags(),
            vec![TAG_GRANT_LEASE, TAG_REMOVE_OWNER, TAG_GRANT_LEASE]
        );
    }

    #[test]
    fn occ_write_reaches_storage_on_revoke() {
        let c = cluster(CacheMode::WriteThroughOcc, 2);
        let a = c.node(1);
        let gfi = a.gfi(a.open("f", true).unwrap()).unwrap();
        a.write_page(gfi, 0, &PageData::patterned(5)).unwrap();
        c.node(2).open("f", false).unwrap();
        assert_eq!(c.node(2).read_page(gfi, 0).unwrap(), PageData::patterned(5));
        assert_eq!(a.lease(gfi), LeaseType::Null);
        assert_eq!(a.stats().occ_passes, 1);
    }

    #[test]
    fn buffer_eviction_writes_dirty_victim() {
        let mut cfg = ClusterConfig::new(CacheMode::WriteBackLease, 1);
        cfg.client.flusher = false;
        cfg.client.buffer_capacity = 2 * crate::types::PAGE_SIZE;
        let c = Cluster::new(cfg).unwrap();
        let n = c.node(1);
        let gfi = n.gfi(n.open("f", true).unwrap()).unwrap();
        for i in 0..3 {
            n.write_page(gfi, i, &PageData::patterned(i)).unwrap();
        }
        let before = writes(&c);
        n.flush_now();
        let after = writes(&c);
        assert_eq!((after.0 - before.0, after.1 - before.1), (1, 1));
        assert_eq!(n.daemon().with_buffer(|b| b.evictions()), (1, 1));
    }
}
