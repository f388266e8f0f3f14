//! Per-node POSIX-like facade over the kernel cache and the daemon.

pub mod demo;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use crate::cost::{charge, CostModel};
use crate::daemon::{Daemon, DaemonConfig, DEFAULT_BUFFER_CAPACITY, DEFAULT_READAHEAD, OCC_RETRY_CAP};
use crate::error::{Error, Result};
use crate::kcache::{KcConfig, KernelCache, DEFAULT_FLUSH_INTERVAL, DEFAULT_SOFT_TIMEOUT};
use crate::lockorder::LockConfig;
use crate::probe::Probes;
use crate::storage::StorageClient;
use crate::transport::{Endpoint, Service};
use crate::types::{CacheMode, Gfi, LeaseType, NodeId, PageData, PAGE_SIZE};

/// Everything configurable about one node.
#[derive(Clone, Copy, Debug)]
pub struct ClientConfig {
    pub mode: CacheMode,
    pub cost: CostModel,
    pub buffer_capacity: usize,
    pub readahead: u64,
    pub flush_interval: Duration,
    pub soft_timeout: Duration,
    pub manager_retry: Duration,
    pub occ_retry_cap: u32,
    pub naive_revoke: bool,
    pub locks: LockConfig,
    /// Run the periodic writeback thread.
    pub flusher: bool,
}

impl ClientConfig {
    pub fn new(mode: CacheMode) -> Self {
        ClientConfig {
            mode,
            cost: CostModel::zero(),
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            readahead: DEFAULT_READAHEAD,
            flush_interval: DEFAULT_FLUSH_INTERVAL,
            soft_timeout: DEFAULT_SOFT_TIMEOUT,
            manager_retry: Duration::from_millis(20),
            occ_retry_cap: OCC_RETRY_CAP,
            naive_revoke: false,
            locks: LockConfig::default(),
            flusher: true,
        }
    }
}

/// Handle returned by [`ClientNode::open`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fd(pub u64);

#[derive(Clone, Debug)]
struct OpenFile {
    gfi: Gfi,
    path: Arc<str>,
    cursor: u64,
}

/// Counter snapshot of one node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    /// Kernel/daemon round trips made for application reads and writes.
    pub round_trips: u64,
    pub lease_upcalls: u64,
    pub grant_requests: u64,
    pub revocations: u64,
    pub occ_aborts: u64,
    pub occ_passes: u64,
    pub occ_livelocks: u64,
    pub fallbacks: u64,
    pub storage_reads: u64,
    pub storage_writes: u64,
}

pub struct ClientNode {
    id: NodeId,
    cfg: ClientConfig,
    kc: Arc<KernelCache>,
    daemon: Arc<Daemon>,
    storage: Arc<StorageClient>,
    open: Mutex<HashMap<Fd, OpenFile>>,
    lengths: Mutex<HashMap<Gfi, u64>>,
    next_fd: AtomicU64,
    stop: Arc<AtomicBool>,
    flusher: Mutex<Option<JoinHandle<()>>>,
}

impl ClientNode {
    pub fn new(
        id: NodeId,
        cfg: ClientConfig,
        storage: Arc<StorageClient>,
        manager: Arc<dyn Endpoint>,
        probes: Arc<Probes>,
    ) -> Arc<Self> {
        let kc = KernelCache::new(
            id,
            KcConfig {
                mode: cfg.mode,
                flush_interval: cfg.flush_interval,
                soft_timeout: cfg.soft_timeout,
                crossing: cfg.cost.crossing,
                locks: cfg.locks,
            },
            probes.clone(),
        );
        let daemon = Daemon::new(
            id,
            DaemonConfig {
                mode: cfg.mode,
                buffer_capacity: cfg.buffer_capacity,
                readahead: cfg.readahead,
                soft_timeout: cfg.soft_timeout,
                manager_retry: cfg.manager_retry,
                occ_retry_cap: cfg.occ_retry_cap,
                naive_revoke: cfg.naive_revoke,
                locks: cfg.locks,
            },
            &kc,
            storage.clone(),
            manager,
            probes,
        );
        kc.bind(daemon.clone());
        let node = Arc::new(ClientNode {
            id,
            cfg,
            kc,
            daemon,
            storage,
            open: Mutex::new(HashMap::new()),
            lengths: Mutex::new(HashMap::new()),
            next_fd: AtomicU64::new(3),
            stop: Arc::new(AtomicBool::new(false)),
            flusher: Mutex::new(None),
        });
        if cfg.flusher {
            node.start_flusher();
        }
        node
    }

    fn start_flusher(&self) {
        let kc: Weak<KernelCache> = Arc::downgrade(&self.kc);
        let stop = self.stop.clone();
        let tick = (self.cfg.flush_interval / 4).clamp(Duration::from_millis(5), Duration::from_millis(250));
        let handle = std::thread::Builder::new()
            .name(format!("flusher-{}", self.id))
            .spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    std::thread::sleep(tick);
                    match kc.upgrade() {
                        Some(kc) => {
                            kc.background_flush();
                        }
                        None => break,
                    }
                }
            })
            .expect("spawn flusher");
        *self.flusher.lock() = Some(handle);
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn mode(&self) -> CacheMode {
        self.cfg.mode
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn kcache(&self) -> &Arc<KernelCache> {
        &self.kc
    }

    pub fn daemon(&self) -> &Arc<Daemon> {
        &self.daemon
    }

    /// The daemon as the target of the manager's revocations.
    pub fn revoke_service(&self) -> Arc<dyn Service> {
        self.daemon.clone()
    }

    /// Opens `path`, creating it first when `create` is set and it is
    /// missing. The file's lease starts out Null.
    pub fn open(&self, path: &str, create: bool) -> Result<Fd> {
        charge(self.cfg.cost.syscall);
        let (gfi, length) = match self.storage.resolve(path) {
            Ok(r) => r,
            Err(Error::NotFound(_)) if create => match self.storage.create(path) {
                Ok(gfi) => (gfi, 0),
                Err(Error::AlreadyExists(_)) => self.storage.resolve(path)?,
                Err(e) => return Err(e),
            },
            Err(e) => return Err(e),
        };
        self.kc.open(gfi);
        let mut lengths = self.lengths.lock();
        let known = lengths.entry(gfi).or_insert(0);
        *known = (*known).max(length);
        drop(lengths);
        let fd = Fd(self.next_fd.fetch_add(1, Ordering::Relaxed));
        self.open.lock().insert(
            fd,
            OpenFile {
                gfi,
                path: path.into(),
                cursor: 0,
            },
        );
        Ok(fd)
    }

    pub fn close(&self, fd: Fd) -> Result<()> {
        self.open.lock().remove(&fd).map(|_| ()).ok_or(Error::BadHandle(fd.0))
    }

    pub fn gfi(&self, fd: Fd) -> Result<Gfi> {
        self.file(fd).map(|f| f.gfi)
    }

    /// Offset just past the last byte read or written through `fd`.
    pub fn cursor(&self, fd: Fd) -> Result<u64> {
        self.file(fd).map(|f| f.cursor)
    }

    fn file(&self, fd: Fd) -> Result<OpenFile> {
        self.open.lock().get(&fd).cloned().ok_or(Error::BadHandle(fd.0))
    }

    fn advance(&self, fd: Fd, to: u64) {
        if let Some(f) = self.open.lock().get_mut(&fd) {
            f.cursor = to;
        }
    }

    /// Size as known to this node: storage length at open or re-check,
    /// extended by local writes.
    pub fn length(&self, gfi: Gfi) -> u64 {
        self.lengths.lock().get(&gfi).copied().unwrap_or(0)
    }

    fn refresh_length(&self, gfi: Gfi, path_len: u64) -> u64 {
        let mut lengths = self.lengths.lock();
        let l = lengths.entry(gfi).or_insert(0);
        *l = (*l).max(path_len);
        *l
    }

    /// Reads up to `len` bytes at `offset`; a range past the end of the file
    /// yields the available prefix.
    pub fn read(&self, fd: Fd, offset: u64, len: usize) -> Result<Vec<u8>> {
        charge(self.cfg.cost.syscall);
        let file = self.file(fd)?;
        let gfi = file.gfi;
        let want_end = offset.saturating_add(len as u64);
        let mut end = self.length(gfi);
        if want_end > end {
            // Another node may have extended the file. Holding the lease
            // means any such writer has flushed, so storage is current.
            self.kc.read(gfi, offset / PAGE_SIZE as u64)?;
            let (_, stored) = self.storage.resolve(&file.path)?;
            end = self.refresh_length(gfi, stored);
        }
        let end = end.min(want_end);
        let mut out = Vec::with_capacity(end.saturating_sub(offset) as usize);
        let mut pos = offset;
        while pos < end {
            let index = pos / PAGE_SIZE as u64;
            let in_page = (pos % PAGE_SIZE as u64) as usize;
            let take = ((PAGE_SIZE - in_page) as u64).min(end - pos) as usize;
            let page = self.kc.read(gfi, index)?;
            out.extend_from_slice(&page.as_slice()[in_page..in_page + take]);
            pos += take as u64;
        }
        self.advance(fd, pos.max(offset));
        Ok(out)
    }

    /// Writes `bytes` at `offset`, splitting at page boundaries.
    pub fn write(&self, fd: Fd, offset: u64, bytes: &[u8]) -> Result<usize> {
        charge(self.cfg.cost.syscall);
        let gfi = self.gfi(fd)?;
        let mut done = 0;
        while done < bytes.len() {
            let pos = offset + done as u64;
            let index = pos / PAGE_SIZE as u64;
            let in_page = (pos % PAGE_SIZE as u64) as usize;
            let take = (PAGE_SIZE - in_page).min(bytes.len() - done);
            self.kc.write(gfi, index, in_page, &bytes[done..done + take])?;
            done += take;
            self.refresh_length(gfi, pos + take as u64);
        }
        self.advance(fd, offset + done as u64);
        Ok(done)
    }

    /// Whole-page read, bypassing the byte-range bookkeeping.
    pub fn read_page(&self, gfi: Gfi, index: u64) -> Result<PageData> {
        charge(self.cfg.cost.syscall);
        self.kc.read(gfi, index)
    }

    /// Whole-page write, bypassing the byte-range bookkeeping.
    pub fn write_page(&self, gfi: Gfi, index: u64, page: &PageData) -> Result<()> {
        charge(self.cfg.cost.syscall);
        self.kc.write(gfi, index, 0, page.as_slice())?;
        self.refresh_length(gfi, (index + 1) * PAGE_SIZE as u64);
        Ok(())
    }

    pub fn fsync(&self, fd: Fd) -> Result<()> {
        charge(self.cfg.cost.syscall);
        self.kc.fsync(self.gfi(fd)?)
    }

    pub fn fsync_gfi(&self, gfi: Gfi) -> Result<()> {
        charge(self.cfg.cost.syscall);
        self.kc.fsync(gfi)
    }

    /// One pass of background writeback regardless of page age.
    pub fn flush_now(&self) -> usize {
        self.kc.flush_older_than(Duration::ZERO)
    }

    /// Local write-through revocation of `gfi`, as if the manager had asked.
    pub fn occ_revoke(&self, gfi: Gfi) -> Result<()> {
        self.daemon.occ_revoke(gfi, u64::MAX)
    }

    pub fn lease(&self, gfi: Gfi) -> LeaseType {
        match self.cfg.mode {
            CacheMode::WriteThroughOcc => self.daemon.occ_lease(gfi),
            _ => self.kc.lease(gfi),
        }
    }

    pub fn stats(&self) -> NodeStats {
        let k = self.kc.stats();
        let d = self.daemon.stats();
        let ld = |c: &AtomicU64| c.load(Ordering::Relaxed);
        NodeStats {
            round_trips: k.io_round_trips(),
            lease_upcalls: ld(&k.lease_upcalls),
            grant_requests: ld(&d.grant_requests),
            revocations: ld(&d.revokes_handled),
            occ_aborts: ld(&d.occ_aborts),
            occ_passes: ld(&d.occ_passes),
            occ_livelocks: ld(&d.occ_livelocks),
            fallbacks: ld(&k.fallbacks),
            storage_reads: ld(&d.storage_reads),
            storage_writes: ld(&d.storage_writes),
        }
    }

    /// Stops the background flusher and waits for it.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.flusher.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for ClientNode {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
