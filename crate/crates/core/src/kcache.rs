//! The in-process stand-in for the kernel driver: a per-node page cache with
//! the distributed lease stored next to each inode.
//!
//! Lock discipline per inode, in acquisition order:
//!
//! 1. `gate`: single-flight lease acquisition.
//! 2. `lease`: reader-writer guard over the lease record. I/O takes it
//!    shared only long enough to check the lease and register itself in
//!    `in_flight`; revocation takes it exclusively and then waits for
//!    `in_flight` to drain.
//! 3. `pages`: the page map.
//!
//! The acquisition upcall runs with only the gate held. Holding the lease
//! guard across it would deadlock whenever the manager has to revoke this
//! same node before it can answer.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

use crate::cost;
use crate::error::{Error, Result};
use crate::lockorder::{LockClass, LockConfig, TrackedMutex, TrackedRwLock};
use crate::probe::Probes;
use crate::types::{lease_satisfies, CacheMode, Gfi, Intent, LeaseType, NodeId, PageData, PAGE_SIZE};

pub const DEFAULT_FLUSH_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_SOFT_TIMEOUT: Duration = Duration::from_secs(30);

/// How hard a lease acquisition tries before reporting the manager lost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patience {
    /// Keep retrying for up to the soft timeout.
    Wait,
    /// One attempt. Used to probe for recovery while in fallback.
    Once,
}

/// Calls from the kernel tier into its node's daemon.
pub trait Upcalls: Send + Sync {
    /// Obtains `want` from the manager and returns the grant's epoch.
    /// `held` is the lease the kernel had before asking; `Read` with a
    /// `Write` want means an escalation whose local release already ran.
    fn acquire_lease(&self, gfi: Gfi, held: LeaseType, want: LeaseType, patience: Patience) -> Result<u64>;
    /// Kernel miss: buffer cache, then storage.
    fn read_miss(&self, gfi: Gfi, index: u64) -> Result<PageData>;
    /// Background writeback into the buffer cache.
    fn write_back(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()>;
    /// Pushes `pages` plus whatever the buffer cache holds dirty for `gfi`
    /// to storage.
    fn sync(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()>;
    /// Write-through of one page, checked against the daemon-side lease.
    /// `Ok(false)` means the daemon holds no write lease.
    fn write_through(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<bool>;
    /// Miss fill checked against the daemon-side lease; `None` means no
    /// read lease is held.
    fn checked_fill(&self, gfi: Gfi, index: u64) -> Result<Option<PageData>>;
    /// Daemon-side lease acquisition for the write-through mode.
    fn occ_acquire(&self, gfi: Gfi, intent: Intent) -> Result<()>;
    fn direct_read(&self, gfi: Gfi, index: u64) -> Result<PageData>;
    fn direct_write(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<()>;
    /// Flushes everything dirty for `gfi` straight to storage and forgets
    /// cached state, ahead of uncached operation.
    fn enter_fallback(&self, gfi: Gfi, dirty: Vec<(u64, PageData)>) -> Result<()>;
}

#[derive(Clone, Copy, Debug)]
pub struct KcConfig {
    pub mode: CacheMode,
    pub flush_interval: Duration,
    pub soft_timeout: Duration,
    /// Simulated cost of one kernel/daemon round trip.
    pub crossing: Duration,
    pub locks: LockConfig,
}

impl KcConfig {
    pub fn new(mode: CacheMode) -> Self {
        KcConfig {
            mode,
            flush_interval: DEFAULT_FLUSH_INTERVAL,
            soft_timeout: DEFAULT_SOFT_TIMEOUT,
            crossing: Duration::ZERO,
            locks: LockConfig::default(),
        }
    }
}

/// Counters of kernel-to-daemon traffic.
#[derive(Debug, Default)]
pub struct KcStats {
    pub lease_upcalls: AtomicU64,
    pub read_misses: AtomicU64,
    pub write_throughs: AtomicU64,
    pub checked_fills: AtomicU64,
    pub occ_acquires: AtomicU64,
    pub direct_ios: AtomicU64,
    pub writebacks: AtomicU64,
    pub syncs: AtomicU64,
    pub revocations: AtomicU64,
    pub fallbacks: AtomicU64,
}

impl KcStats {
    /// Round trips made on behalf of application reads and writes, leaving
    /// out background writeback and fsync.
    pub fn io_round_trips(&self) -> u64 {
        [
            &self.lease_upcalls,
            &self.read_misses,
            &self.write_throughs,
            &self.checked_fills,
            &self.occ_acquires,
            &self.direct_ios,
        ]
        .iter()
        .map(|c| c.load(Ordering::Relaxed))
        .sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct LeaseState {
    ty: LeaseType,
    epoch: u64,
    granted_at: Instant,
}

struct CachedPage {
    data: PageData,
    dirty: bool,
}

#[derive(Default)]
struct PageMap {
    pages: BTreeMap<u64, CachedPage>,
    dirty_since: Option<Instant>,
}

impl PageMap {
    fn dirty(&self) -> Vec<(u64, PageData)> {
        self.pages
            .iter()
            .filter(|(_, p)| p.dirty)
            .map(|(&i, p)| (i, p.data.clone()))
            .collect()
    }

    fn mark_clean(&mut self) {
        for p in self.pages.values_mut() {
            p.dirty = false;
        }
        self.dirty_since = None;
    }

    fn clear(&mut self) {
        self.pages.clear();
        self.dirty_since = None;
    }
}

/// Tracks which grant epoch has been applied locally so a revocation that
/// overtakes its grant's reply waits for it instead of racing.
#[derive(Default)]
pub(crate) struct EpochGate {
    st: Mutex<(u64, bool)>,
    cv: Condvar,
}

impl EpochGate {
    pub(crate) fn begin(&self) {
        self.st.lock().1 = true;
    }

    pub(crate) fn finish(&self, epoch: Option<u64>) {
        let mut st = self.st.lock();
        if let Some(e) = epoch {
            st.0 = st.0.max(e);
        }
        st.1 = false;
        self.cv.notify_all();
    }

    /// Waits while an acquisition is outstanding and `epoch` is not yet
    /// applied.
    pub(crate) fn wait_for(&self, epoch: u64, limit: Duration) {
        let deadline = Instant::now() + limit;
        let mut st = self.st.lock();
        while st.0 < epoch && st.1 {
            if self.cv.wait_until(&mut st, deadline).timed_out() {
                break;
            }
        }
    }
}

pub(crate) const EPOCH_WAIT_LIMIT: Duration = Duration::from_secs(1);

/// One inode's state in the kernel tier.
pub struct Inode {
    gfi: Gfi,
    gate: TrackedMutex<()>,
    lease: TrackedRwLock<LeaseState>,
    pages: TrackedMutex<PageMap>,
    in_flight: Mutex<usize>,
    drained: Condvar,
    epochs: EpochGate,
    fallback: AtomicBool,
    lease_mirror: AtomicU8,
}

impl Inode {
    fn new(gfi: Gfi, locks: LockConfig) -> Self {
        Inode {
            gfi,
            gate: TrackedMutex::new((), gfi, LockClass::AcquireGate, locks),
            lease: TrackedRwLock::new(
                LeaseState {
                    ty: LeaseType::Null,
                    epoch: 0,
                    granted_at: Instant::now(),
                },
                gfi,
                LockClass::LeaseGuard,
                locks,
            ),
            pages: TrackedMutex::new(PageMap::default(), gfi, LockClass::InodeGuard, locks),
            in_flight: Mutex::new(0),
            drained: Condvar::new(),
            epochs: EpochGate::default(),
            fallback: AtomicBool::new(false),
            lease_mirror: AtomicU8::new(0),
        }
    }

    fn set_lease(&self, l: &mut LeaseState, ty: LeaseType) {
        l.ty = ty;
        self.lease_mirror.store(ty.as_u8(), Ordering::Release);
    }

    fn exit(&self) {
        let mut n = self.in_flight.lock();
        *n -= 1;
        if *n == 0 {
            self.drained.notify_all();
        }
    }

    fn drain(&self) {
        let mut n = self.in_flight.lock();
        while *n > 0 {
            self.drained.wait(&mut n);
        }
    }
}

/// Decrements `in_flight` when an operation leaves the cached path.
struct InFlight<'a>(&'a Inode);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.exit();
    }
}

enum Access<'a> {
    Cached(Option<InFlight<'a>>),
    Direct,
}

/// The kernel page cache of one node.
pub struct KernelCache {
    node: NodeId,
    cfg: KcConfig,
    inodes: RwLock<HashMap<Gfi, Arc<Inode>>>,
    upcalls: OnceLock<Arc<dyn Upcalls>>,
    probes: Arc<Probes>,
    stats: KcStats,
}

impl KernelCache {
    pub fn new(node: NodeId, cfg: KcConfig, probes: Arc<Probes>) -> Arc<Self> {
        Arc::new(KernelCache {
            node,
            cfg,
            inodes: RwLock::new(HashMap::new()),
            upcalls: OnceLock::new(),
            probes,
            stats: KcStats::default(),
        })
    }

    pub fn bind(&self, upcalls: Arc<dyn Upcalls>) {
        if self.upcalls.set(upcalls).is_err() {
            panic!("kernel cache of node {} bound twice", self.node);
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn mode(&self) -> CacheMode {
        self.cfg.mode
    }

    pub fn config(&self) -> &KcConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &KcStats {
        &self.stats
    }

    fn up(&self) -> &dyn Upcalls {
        self.upcalls.get().expect("kernel cache used before bind").as_ref()
    }

    fn cross(&self, counter: &AtomicU64) -> &dyn Upcalls {
        counter.fetch_add(1, Ordering::Relaxed);
        cost::charge(self.cfg.crossing);
        self.up()
    }

    /// Inode state for `gfi`, created with a null lease on first use.
    pub fn open(&self, gfi: Gfi) -> Arc<Inode> {
        if let Some(i) = self.inodes.read().get(&gfi) {
            return i.clone();
        }
        self.inodes
            .write()
            .entry(gfi)
            .or_insert_with(|| Arc::new(Inode::new(gfi, self.cfg.locks)))
            .clone()
    }

    fn get(&self, gfi: Gfi) -> Option<Arc<Inode>> {
        self.inodes.read().get(&gfi).cloned()
    }

    fn all(&self) -> Vec<Arc<Inode>> {
        let mut v: Vec<_> = self.inodes.read().values().cloned().collect();
        v.sort_by_key(|i| i.gfi);
        v
    }

    pub fn lease(&self, gfi: Gfi) -> LeaseType {
        self.get(gfi)
            .map(|i| LeaseType::from_u8(i.lease_mirror.load(Ordering::Acquire)).unwrap_or_default())
            .unwrap_or_default()
    }

    pub fn lease_epoch(&self, gfi: Gfi) -> u64 {
        self.get(gfi).map(|i| i.lease.read().epoch).unwrap_or(0)
    }

    pub fn in_fallback(&self, gfi: Gfi) -> bool {
        self.get(gfi).is_some_and(|i| i.fallback.load(Ordering::Acquire))
    }

    /// `(index, dirty)` for every cached page of `gfi`.
    pub fn cached_pages(&self, gfi: Gfi) -> Vec<(u64, bool)> {
        match self.get(gfi) {
            Some(i) => i.pages.lock().pages.iter().map(|(&k, p)| (k, p.dirty)).collect(),
            None => Vec::new(),
        }
    }

    fn expired(&self, l: &LeaseState) -> bool {
        l.ty != LeaseType::Null && l.granted_at.elapsed() >= self.cfg.soft_timeout
    }

    /// Passes the lease check for `intent`, acquiring the lease if needed.
    fn enter<'a>(&self, inode: &'a Inode, intent: Intent) -> Result<Access<'a>> {
        if self.cfg.mode != CacheMode::WriteBackLease {
            return Ok(Access::Cached(None));
        }
        loop {
            if inode.fallback.load(Ordering::Acquire) {
                match self.acquire(inode, intent, Patience::Once) {
                    Ok(()) => {}
                    Err(e) if e.is_unreachable() => return Ok(Access::Direct),
                    Err(e) => return Err(e),
                }
                continue;
            }
            {
                let l = inode.lease.read();
                if lease_satisfies(l.ty, intent) && !self.expired(&l) {
                    *inode.in_flight.lock() += 1;
                    return Ok(Access::Cached(Some(InFlight(inode))));
                }
            }
            self.acquire(inode, intent, Patience::Wait)?;
        }
    }

    fn acquire(&self, inode: &Inode, intent: Intent, patience: Patience) -> Result<()> {
        let _gate = inode.gate.lock();
        let fallback = inode.fallback.load(Ordering::Acquire);
        let held = {
            let l = inode.lease.read();
            if !fallback && lease_satisfies(l.ty, intent) && !self.expired(&l) {
                return Ok(());
            }
            l.ty
        };
        let want = held.max(intent.lease());
        if held == LeaseType::Read && want == LeaseType::Write {
            // Escalation: give up the read lease locally first. A read lease
            // never has dirty pages, so clearing loses nothing.
            let mut l = inode.lease.write();
            inode.drain();
            let mut pages = inode.pages.lock();
            debug_assert!(pages.dirty().is_empty());
            pages.clear();
            drop(pages);
            inode.set_lease(&mut l, LeaseType::Null);
        }
        inode.epochs.begin();
        let result = self
            .cross(&self.stats.lease_upcalls)
            .acquire_lease(inode.gfi, held, want, patience);
        match result {
            Ok(epoch) => {
                let mut l = inode.lease.write();
                l.epoch = l.epoch.max(epoch);
                l.granted_at = Instant::now();
                inode.set_lease(&mut l, want);
                inode.fallback.store(false, Ordering::Release);
                drop(l);
                inode.epochs.finish(Some(epoch));
                Ok(())
            }
            Err(e) => {
                inode.epochs.finish(None);
                if e.is_unreachable() && patience == Patience::Wait {
                    self.enter_fallback(inode)?;
                    return Ok(());
                }
                Err(e)
            }
        }
    }

    fn enter_fallback(&self, inode: &Inode) -> Result<()> {
        let mut l = inode.lease.write();
        inode.drain();
        let mut pages = inode.pages.lock();
        let dirty = pages.dirty();
        self.up().enter_fallback(inode.gfi, dirty)?;
        pages.clear();
        drop(pages);
        inode.set_lease(&mut l, LeaseType::Null);
        inode.fallback.store(true, Ordering::Release);
        self.stats.fallbacks.fetch_add(1, Ordering::Relaxed);
        tracing::warn!(node = %self.node, gfi = %inode.gfi, "lease manager unreachable; file is uncached");
        Ok(())
    }

    /// Reads one page.
    pub fn read(&self, gfi: Gfi, index: u64) -> Result<PageData> {
        let inode = self.open(gfi);
        if self.cfg.mode == CacheMode::WriteThroughOcc {
            return self.wt_read(&inode, index);
        }
        let access = self.enter(&inode, Intent::Read)?;
        match access {
            Access::Direct => self.cross(&self.stats.direct_ios).direct_read(gfi, index),
            Access::Cached(_in_flight) => {
                let mut pages = inode.pages.lock();
                if let Some(p) = pages.pages.get(&index) {
                    return Ok(p.data.clone());
                }
                let data = self.cross(&self.stats.read_misses).read_miss(gfi, index)?;
                pages.pages.insert(
                    index,
                    CachedPage {
                        data: data.clone(),
                        dirty: false,
                    },
                );
                Ok(data)
            }
        }
    }

    /// Writes `bytes` at `offset` within page `index`; returns the count
    /// written.
    pub fn write(&self, gfi: Gfi, index: u64, offset: usize, bytes: &[u8]) -> Result<usize> {
        if offset + bytes.len() > PAGE_SIZE {
            return Err(Error::BadRange {
                offset,
                len: bytes.len(),
            });
        }
        if bytes.is_empty() {
            return Ok(0);
        }
        let inode = self.open(gfi);
        if self.cfg.mode == CacheMode::WriteThroughOcc {
            return self.wt_write(&inode, index, offset, bytes);
        }
        let access = self.enter(&inode, Intent::Write)?;
        match access {
            Access::Direct => {
                let mut page = if bytes.len() == PAGE_SIZE {
                    PageData::zeroed()
                } else {
                    self.cross(&self.stats.direct_ios).direct_read(gfi, index)?
                };
                page.as_mut_slice()[offset..offset + bytes.len()].copy_from_slice(bytes);
                self.cross(&self.stats.direct_ios).direct_write(gfi, index, &page)?;
                Ok(bytes.len())
            }
            Access::Cached(_in_flight) => {
                let mut pages = inode.pages.lock();
                if bytes.len() < PAGE_SIZE && !pages.pages.contains_key(&index) {
                    let data = self.cross(&self.stats.read_misses).read_miss(gfi, index)?;
                    pages.pages.insert(index, CachedPage { data, dirty: false });
                }
                if self.cfg.mode == CacheMode::WriteBackLease {
                    debug_assert_eq!(
                        inode.lease_mirror.load(Ordering::Acquire),
                        LeaseType::Write.as_u8(),
                        "page dirtied without a write lease"
                    );
                }
                let entry = pages.pages.entry(index).or_insert_with(|| CachedPage {
                    data: PageData::zeroed(),
                    dirty: false,
                });
                entry.data.as_mut_slice()[offset..offset + bytes.len()].copy_from_slice(bytes);
                entry.dirty = true;
                pages.dirty_since.get_or_insert_with(Instant::now);
                Ok(bytes.len())
            }
        }
    }

    fn wt_read(&self, inode: &Inode, index: u64) -> Result<PageData> {
        loop {
            let mut pages = inode.pages.lock();
            if let Some(p) = pages.pages.get(&index) {
                return Ok(p.data.clone());
            }
            match self.cross(&self.stats.checked_fills).checked_fill(inode.gfi, index)? {
                Some(data) => {
                    pages.pages.insert(
                        index,
                        CachedPage {
                            data: data.clone(),
                            dirty: false,
                        },
                    );
                    return Ok(data);
                }
                None => {
                    drop(pages);
                    self.cross(&self.stats.occ_acquires).occ_acquire(inode.gfi, Intent::Read)?;
                }
            }
        }
    }

    fn wt_write(&self, inode: &Inode, index: u64, offset: usize, bytes: &[u8]) -> Result<usize> {
        loop {
            let mut pages = inode.pages.lock();
            self.probes.hit("write.after_inode_guard");
            let old = pages.pages.get(&index).map(|p| p.data.clone());
            let mut page = match &old {
                Some(p) => p.clone(),
                None if bytes.len() == PAGE_SIZE => PageData::zeroed(),
                None => match self.cross(&self.stats.checked_fills).checked_fill(inode.gfi, index)? {
                    Some(p) => p,
                    None => {
                        drop(pages);
                        self.cross(&self.stats.occ_acquires).occ_acquire(inode.gfi, Intent::Write)?;
                        continue;
                    }
                },
            };
            page.as_mut_slice()[offset..offset + bytes.len()].copy_from_slice(bytes);
            let accepted = self
                .cross(&self.stats.write_throughs)
                .write_through(inode.gfi, index, &page);
            match accepted {
                Ok(true) => {
                    pages.pages.insert(
                        index,
                        CachedPage {
                            data: page,
                            dirty: false,
                        },
                    );
                    return Ok(bytes.len());
                }
                Ok(false) => {
                    drop(pages);
                    self.cross(&self.stats.occ_acquires).occ_acquire(inode.gfi, Intent::Write)?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Revocation: blocks new I/O, drains in-flight I/O, hands dirty pages
    /// to `flush`, empties the cache and nulls the lease. `epoch` names the
    /// grant being revoked; revocations of superseded grants are no-ops.
    /// Returns whether the lease was released (false for a no-op).
    pub fn release_dist_lease(
        &self,
        gfi: Gfi,
        epoch: u64,
        flush: &mut dyn FnMut(Vec<(u64, PageData)>) -> Result<()>,
    ) -> Result<bool> {
        let Some(inode) = self.get(gfi) else {
            return Ok(false);
        };
        inode.epochs.wait_for(epoch, EPOCH_WAIT_LIMIT);
        let mut l = inode.lease.write();
        if l.epoch > epoch {
            return Ok(false);
        }
        inode.drain();
        let mut pages = inode.pages.lock();
        let dirty = pages.dirty();
        if !dirty.is_empty() {
            flush(dirty).map_err(|e| Error::FlushFailed(e.to_string()))?;
        }
        pages.clear();
        drop(pages);
        inode.set_lease(&mut l, LeaseType::Null);
        self.stats.revocations.fetch_add(1, Ordering::Relaxed);
        Ok(true)
    }

    /// Drops every cached page of `gfi` and returns how many there were.
    pub fn invalidate(&self, gfi: Gfi) -> usize {
        match self.get(gfi) {
            Some(inode) => {
                let mut pages = inode.pages.lock();
                let n = pages.pages.len();
                pages.clear();
                n
            }
            None => 0,
        }
    }

    /// Writes back inodes whose dirty set is at least `min_age` old into the
    /// buffer cache. Leases are kept. Returns the number of pages written.
    pub fn flush_older_than(&self, min_age: Duration) -> usize {
        let mut flushed = 0;
        for inode in self.all() {
            let _l = (self.cfg.mode == CacheMode::WriteBackLease).then(|| inode.lease.read());
            let mut pages = inode.pages.lock();
            match pages.dirty_since {
                Some(t) if t.elapsed() >= min_age => {}
                _ => continue,
            }
            let dirty = pages.dirty();
            let n = dirty.len();
            match self.cross(&self.stats.writebacks).write_back(inode.gfi, dirty) {
                Ok(()) => {
                    pages.mark_clean();
                    flushed += n;
                }
                Err(e) => {
                    tracing::debug!(gfi = %inode.gfi, error = %e, "background writeback failed");
                }
            }
        }
        flushed
    }

    /// One pass of the background flusher with the configured interval.
    pub fn background_flush(&self) -> usize {
        self.flush_older_than(self.cfg.flush_interval)
    }

    /// Drains `gfi`'s dirty pages through the daemon to storage.
    pub fn fsync(&self, gfi: Gfi) -> Result<()> {
        let inode = self.open(gfi);
        let _l = (self.cfg.mode == CacheMode::WriteBackLease).then(|| inode.lease.read());
        let mut pages = inode.pages.lock();
        let dirty = pages.dirty();
        self.cross(&self.stats.syncs).sync(gfi, dirty)?;
        pages.mark_clean();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    /// Daemon stand-in: a flat page store, a lease counter, and switches
    /// for failure injection.
    #[derive(Default)]
    struct FakeDaemon {
        store: Mutex<HashMap<(Gfi, u64), PageData>>,
        grants: AtomicU64,
        unreachable: AtomicBool,
        fail_writeback: AtomicBool,
        synced: Mutex<Vec<(u64, PageData)>>,
        written_back: AtomicU32,
    }

    impl Upcalls for FakeDaemon {
        fn acquire_lease(&self, _: Gfi, _: LeaseType, _: LeaseType, _: Patience) -> Result<u64> {
            if self.unreachable.load(Ordering::SeqCst) {
                return Err(Error::ManagerUnreachable);
            }
            Ok(self.grants.fetch_add(1, Ordering::SeqCst) + 1)
        }
        fn read_miss(&self, gfi: Gfi, index: u64) -> Result<PageData> {
            Ok(self.store.lock().get(&(gfi, index)).cloned().unwrap_or_else(PageData::zeroed))
        }
        fn write_back(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
            if self.fail_writeback.load(Ordering::SeqCst) {
                return Err(Error::Storage("down".into()));
            }
            self.written_back.fetch_add(pages.len() as u32, Ordering::SeqCst);
            let mut s = self.store.lock();
            for (i, p) in pages {
                s.insert((gfi, i), p);
            }
            Ok(())
        }
        fn sync(&self, gfi: Gfi, pages: Vec<(u64, PageData)>) -> Result<()> {
            self.synced.lock().extend(pages.iter().cloned());
            self.write_back(gfi, pages)
        }
        fn write_through(&self, _: Gfi, _: u64, _: &PageData) -> Result<bool> {
            Err(Error::ModeMismatch)
        }
        fn checked_fill(&self, _: Gfi, _: u64) -> Result<Option<PageData>> {
            Err(Error::ModeMismatch)
        }
        fn occ_acquire(&self, _: Gfi, _: Intent) -> Result<()> {
            Err(Error::ModeMismatch)
        }
        fn direct_read(&self, gfi: Gfi, index: u64) -> Result<PageData> {
            self.read_miss(gfi, index)
        }
        fn direct_write(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<()> {
            self.store.lock().insert((gfi, index), page.clone());
            Ok(())
        }
        fn enter_fallback(&self, gfi: Gfi, dirty: Vec<(u64, PageData)>) -> Result<()> {
            self.write_back(gfi, dirty)
        }
    }

    const G: Gfi = Gfi::new(0, 1);

    fn kc(cfg: KcConfig) -> (Arc<KernelCache>, Arc<FakeDaemon>) {
        let d = Arc::new(FakeDaemon::default());
        let k = KernelCache::new(NodeId(1), cfg, Probes::new());
        k.bind(d.clone());
        (k, d)
    }

    fn wbl() -> (Arc<KernelCache>, Arc<FakeDaemon>) {
        kc(KcConfig::new(CacheMode::WriteBackLease))
    }

    fn full(label: u64) -> PageData {
        PageData::patterned(label)
    }

    #[test]
    fn held_write_lease_serves_reads_without_upcalls() {
        let (k, _) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        let before = k.stats().io_round_trips();
        assert_eq!(k.read(G, 0).unwrap(), full(1));
        assert_eq!(k.stats().io_round_trips(), before);
    }

    #[test]
    fn null_lease_read_makes_one_upcall_then_fills() {
        let (k, d) = wbl();
        d.store.lock().insert((G, 3), full(3));
        assert_eq!(k.lease(G), LeaseType::Null);
        assert_eq!(k.read(G, 3).unwrap(), full(3));
        assert_eq!(k.stats().lease_upcalls.load(Ordering::Relaxed), 1);
        assert_eq!(k.stats().read_misses.load(Ordering::Relaxed), 1);
        assert_eq!(k.lease(G), LeaseType::Read);
    }

    #[test]
    fn concurrent_first_reads_upcall_once_or_twice() {
        for _ in 0..50 {
            let (k, d) = wbl();
            d.store.lock().insert((G, 0), full(9));
            let (a, b) = std::thread::scope(|s| {
                let t1 = s.spawn(|| k.read(G, 0).unwrap());
                let t2 = s.spawn(|| k.read(G, 0).unwrap());
                (t1.join().unwrap(), t2.join().unwrap())
            });
            assert_eq!(a, b);
            let n = k.stats().lease_upcalls.load(Ordering::Relaxed);
            assert!((1..=2).contains(&n), "{n} upcalls");
        }
    }

    #[test]
    fn write_with_write_lease_has_no_round_trip() {
        let (k, _) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        let before = k.stats().io_round_trips();
        k.write(G, 1, 0, full(2).as_slice()).unwrap();
        assert_eq!(k.stats().io_round_trips(), before);
        assert_eq!(k.cached_pages(G), vec![(0, true), (1, true)]);
    }

    #[test]
    fn read_lease_escalates_once() {
        let (k, _) = wbl();
        k.read(G, 0).unwrap();
        assert_eq!(k.lease(G), LeaseType::Read);
        k.write(G, 0, 0, full(5).as_slice()).unwrap();
        assert_eq!(k.stats().lease_upcalls.load(Ordering::Relaxed), 2);
        assert_eq!(k.lease(G), LeaseType::Write);
        assert_eq!(k.cached_pages(G), vec![(0, true)]);
    }

    #[test]
    fn empty_write_changes_nothing() {
        let (k, _) = wbl();
        assert_eq!(k.write(G, 0, 10, &[]).unwrap(), 0);
        assert_eq!(k.lease(G), LeaseType::Null);
        assert!(k.cached_pages(G).is_empty());
        assert_eq!(k.stats().io_round_trips(), 0);
    }

    #[test]
    fn partial_write_fills_the_page_first() {
        let (k, d) = wbl();
        d.store.lock().insert((G, 0), full(7));
        k.write(G, 0, 100, b"hello").unwrap();
        let mut expect = full(7);
        expect.as_mut_slice()[100..105].copy_from_slice(b"hello");
        assert_eq!(k.read(G, 0).unwrap(), expect);
        assert!(k.write(G, 0, 4090, b"too long").is_err());
    }

    #[test]
    fn revoke_flushes_exactly_the_dirty_pages() {
        let (k, _) = wbl();
        for i in 0..3 {
            k.write(G, i, 0, full(i + 10).as_slice()).unwrap();
        }
        let epoch = k.lease_epoch(G);
        let mut seen = Vec::new();
        k.release_dist_lease(G, epoch, &mut |pages| {
            seen = pages;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..3).map(|i| (i, full(i + 10))).collect::<Vec<_>>());
        assert!(k.cached_pages(G).is_empty());
        assert_eq!(k.lease(G), LeaseType::Null);
    }

    #[test]
    fn revoke_of_null_lease_does_not_flush() {
        let (k, _) = wbl();
        k.open(G);
        let mut calls = 0;
        k.release_dist_lease(G, 0, &mut |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        k.release_dist_lease(Gfi::new(5, 5), 0, &mut |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 0);
    }

    #[test]
    fn failed_revoke_flush_keeps_lease_and_pages() {
        let (k, _) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        let e = k.lease_epoch(G);
        let r = k.release_dist_lease(G, e, &mut |_| Err(Error::Storage("down".into())));
        assert!(matches!(r, Err(Error::FlushFailed(_))));
        assert_eq!(k.lease(G), LeaseType::Write);
        assert_eq!(k.cached_pages(G), vec![(0, true)]);
    }

    #[test]
    fn stale_revoke_is_ignored() {
        let (k, _) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        let e = k.lease_epoch(G);
        let released = k
            .release_dist_lease(G, e - 1, &mut |_| panic!("flushed for an old epoch"))
            .unwrap();
        assert!(!released);
        assert_eq!(k.lease(G), LeaseType::Write);
    }

    #[test]
    fn revoke_racing_writes_loses_nothing() {
        let (k, d) = wbl();
        let flushed: Mutex<HashMap<u64, PageData>> = Mutex::new(HashMap::new());
        std::thread::scope(|s| {
            let writer = s.spawn(|| {
                for i in 0..200u64 {
                    k.write(G, i % 4, 0, full(i).as_slice()).unwrap();
                }
            });
            for _ in 0..20 {
                let e = k.lease_epoch(G);
                k.release_dist_lease(G, e, &mut |pages| {
                    let mut f = flushed.lock();
                    for (i, p) in pages.iter() {
                        f.insert(*i, p.clone());
                    }
                    d.write_back(G, pages)
                })
                .unwrap();
            }
            writer.join().unwrap();
        });
        // the last write to each page is either cached or was flushed
        for page in 0..4u64 {
            let last = (0..200u64).filter(|i| i % 4 == page).max().unwrap();
            assert_eq!(k.read(G, page).unwrap(), full(last));
        }
    }

    #[test]
    fn background_flush_cleans_old_dirty_pages() {
        let mut cfg = KcConfig::new(CacheMode::WriteBackLease);
        cfg.flush_interval = Duration::from_millis(20);
        let (k, d) = kc(cfg);
        assert_eq!(k.background_flush(), 0);
        for i in 0..5 {
            k.write(G, i, 0, full(i).as_slice()).unwrap();
        }
        assert_eq!(k.background_flush(), 0, "too young");
        std::thread::sleep(Duration::from_millis(25));
        assert_eq!(k.background_flush(), 5);
        assert!(k.cached_pages(G).iter().all(|&(_, dirty)| !dirty));
        assert_eq!(k.lease(G), LeaseType::Write);
        assert_eq!(d.written_back.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn failed_background_flush_retries_later() {
        let (k, d) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        d.fail_writeback.store(true, Ordering::SeqCst);
        assert_eq!(k.flush_older_than(Duration::ZERO), 0);
        assert_eq!(k.cached_pages(G), vec![(0, true)]);
        d.fail_writeback.store(false, Ordering::SeqCst);
        assert_eq!(k.flush_older_than(Duration::ZERO), 1);
    }

    #[test]
    fn fsync_pushes_dirty_pages_and_skips_clean_inodes() {
        let (k, d) = wbl();
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        k.write(G, 1, 0, full(2).as_slice()).unwrap();
        k.fsync(G).unwrap();
        assert_eq!(d.synced.lock().len(), 2);
        k.fsync(G).unwrap();
        assert_eq!(d.synced.lock().len(), 2);
    }

    #[test]
    fn unreachable_manager_after_expiry_falls_back() {
        let mut cfg = KcConfig::new(CacheMode::WriteBackLease);
        cfg.soft_timeout = Duration::from_millis(30);
        let (k, d) = kc(cfg);
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        d.unreachable.store(true, Ordering::SeqCst);
        // not expired yet: cached operation continues
        k.write(G, 1, 0, full(2).as_slice()).unwrap();
        assert!(!k.in_fallback(G));
        std::thread::sleep(Duration::from_millis(40));
        k.write(G, 2, 0, full(3).as_slice()).unwrap();
        assert!(k.in_fallback(G));
        assert!(k.cached_pages(G).is_empty());
        for i in 0..3 {
            assert_eq!(d.store.lock()[&(G, i)], full(i + 1));
        }
        d.unreachable.store(false, Ordering::SeqCst);
        k.write(G, 3, 0, full(4).as_slice()).unwrap();
        assert!(!k.in_fallback(G));
        assert_eq!(k.cached_pages(G), vec![(3, true)]);
    }

    #[test]
    fn unsafe_mode_never_asks_for_leases() {
        let (k, _) = kc(KcConfig::new(CacheMode::WriteBackUnsafe));
        k.write(G, 0, 0, full(1).as_slice()).unwrap();
        k.read(G, 1).unwrap();
        assert_eq!(k.stats().lease_upcalls.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn io_paths_take_lease_before_inode() {
        use crate::lockorder::start_recording;
        let (k, _) = wbl();
        let name = "order-probe-thread";
        let trace = std::thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                let rec = start_recording();
                k.write(G, 0, 0, full(1).as_slice()).unwrap();
                k.read(G, 0).unwrap();
                k.fsync(G).unwrap();
                let e = k.lease_epoch(G);
                k.release_dist_lease(G, e, &mut |_| Ok(())).unwrap();
                rec.finish()
            })
            .unwrap()
            .join()
            .unwrap();
        let trace: Vec<_> = trace.into_iter().filter(|a| a.thread == name).collect();
        assert!(!trace.is_empty());
        // every inode acquisition is preceded (since the last one) by a lease one
        let mut lease_seen = false;
        for a in trace {
            match a.class {
                LockClass::LeaseGuard => lease_seen = true,
                LockClass::InodeGuard => {
                    assert!(lease_seen, "inode guard without lease guard first");
                    lease_seen = false;
                }
                _ => {}
            }
        }
    }
}
