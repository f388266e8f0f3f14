//! Lock wrappers that enforce the global acquisition order and, when asked,
//! publish a wait-for graph so a watchdog can spot deadlocks.
//!
//! Every tracked lock has a key `(gfi, class)`. A thread may only acquire a
//! lock whose key is strictly greater than every key it already holds. For a
//! single inode this means the lease guard always precedes the inode guard;
//! across inodes the `Gfi` order decides.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::thread::ThreadId;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::types::Gfi;

/// How long the watchdog waits for a cycle before declaring there is none.
pub const WATCHDOG_TIMEOUT: Duration = Duration::from_secs(2);

/// Lock classes in rank order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockClass {
    /// Single-flight gate around lease acquisition (kernel or daemon side).
    AcquireGate,
    /// The kernel inode's lease field.
    LeaseGuard,
    /// The kernel inode's page map.
    InodeGuard,
    /// The daemon-side lease record used by the write-through baseline.
    OccGuard,
}

/// What happens when a thread acquires out of order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderPolicy {
    Panic,
    /// Log the violation and continue. Used by the deliberately broken
    /// revocation path that demonstrates the deadlock.
    Record,
}

#[derive(Clone, Copy, Debug)]
pub struct LockConfig {
    pub policy: OrderPolicy,
    /// Publish waits and holds to the global wait-for graph.
    pub watched: bool,
}

impl Default for LockConfig {
    fn default() -> Self {
        LockConfig {
            policy: OrderPolicy::Panic,
            watched: false,
        }
    }
}

#[derive(Clone, Debug)]
struct LockMeta {
    id: u64,
    gfi: Gfi,
    class: LockClass,
    cfg: LockConfig,
}

impl LockMeta {
    fn new(gfi: Gfi, class: LockClass, cfg: LockConfig) -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        LockMeta {
            id: NEXT.fetch_add(1, Ordering::Relaxed),
            gfi,
            class,
            cfg,
        }
    }

    fn key(&self) -> (Gfi, LockClass) {
        (self.gfi, self.class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub thread: String,
    pub held: (Gfi, LockClass),
    pub acquiring: (Gfi, LockClass),
}

/// One entry of the acquisition trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Acquisition {
    pub thread: String,
    pub gfi: Gfi,
    pub class: LockClass,
    pub exclusive: bool,
    /// Keys the thread already held at the time.
    pub held: Vec<(Gfi, LockClass)>,
}

thread_local! {
    static HELD: RefCell<Vec<(u64, Gfi, LockClass)>> = const { RefCell::new(Vec::new()) };
}

static RECORDERS: AtomicUsize = AtomicUsize::new(0);

fn trace() -> &'static Mutex<Vec<Acquisition>> {
    static T: OnceLock<Mutex<Vec<Acquisition>>> = OnceLock::new();
    T.get_or_init(Default::default)
}

fn violations() -> &'static Mutex<Vec<Violation>> {
    static V: OnceLock<Mutex<Vec<Violation>>> = OnceLock::new();
    V.get_or_init(Default::default)
}

fn thread_label() -> String {
    let t = std::thread::current();
    match t.name() {
        Some(n) => n.to_string(),
        None => format!("{:?}", t.id()),
    }
}

/// Starts collecting tracked acquisitions from every thread. Recordings may
/// overlap; each sees the acquisitions made while it was active.
pub fn start_recording() -> Recording {
    let t = trace().lock();
    RECORDERS.fetch_add(1, Ordering::AcqRel);
    Recording { start: t.len() }
}

pub struct Recording {
    start: usize,
}

impl Recording {
    pub fn finish(self) -> Vec<Acquisition> {
        let t = trace().lock();
        t[self.start.min(t.len())..].to_vec()
    }
}

impl Drop for Recording {
    fn drop(&mut self) {
        let mut t = trace().lock();
        if RECORDERS.fetch_sub(1, Ordering::AcqRel) == 1 {
            t.clear();
        }
    }
}

/// Violations logged under [`OrderPolicy::Record`] since the last call.
pub fn take_violations() -> Vec<Violation> {
    std::mem::take(&mut *violations().lock())
}

/// Keys currently held by the calling thread.
pub fn held_by_current_thread() -> Vec<(Gfi, LockClass)> {
    HELD.with(|h| h.borrow().iter().map(|&(_, g, c)| (g, c)).collect())
}

fn check_order(meta: &LockMeta, exclusive: bool) {
    let key = meta.key();
    let offending = HELD.with(|h| {
        h.borrow()
            .iter()
            .find(|&&(_, g, c)| (g, c) >= key)
            .map(|&(_, g, c)| (g, c))
    });
    if let Some(held) = offending {
        let v = Violation {
            thread: thread_label(),
            held,
            acquiring: key,
        };
        match meta.cfg.policy {
            OrderPolicy::Panic => panic!("lock order violation: {v:?}"),
            OrderPolicy::Record => violations().lock().push(v),
        }
    }
    if RECORDERS.load(Ordering::Acquire) > 0 {
        trace().lock().push(Acquisition {
            thread: thread_label(),
            gfi: meta.gfi,
            class: meta.class,
            exclusive,
            held: held_by_current_thread(),
        });
    }
}

/// Payload used to unwind threads the watchdog has cancelled.
#[derive(Debug)]
pub struct DeadlockAbort;

#[derive(Default)]
struct WaitGraph {
    holders: HashMap<u64, Vec<ThreadId>>,
    waiting: HashMap<ThreadId, u64>,
    names: HashMap<ThreadId, String>,
    cancelled: HashSet<ThreadId>,
}

fn graph() -> &'static Mutex<WaitGraph> {
    static G: OnceLock<Mutex<WaitGraph>> = OnceLock::new();
    G.get_or_init(Default::default)
}

impl WaitGraph {
    fn find_cycle(&self) -> Option<Vec<ThreadId>> {
        let edges = |t: &ThreadId| -> Vec<ThreadId> {
            self.waiting
                .get(t)
                .and_then(|l| self.holders.get(l))
                .map(|hs| hs.iter().copied().filter(|h| h != t).collect())
                .unwrap_or_default()
        };
        for &start in self.waiting.keys() {
            // depth-first from `start`, looking for a path back to it
            let mut stack = vec![(start, vec![start])];
            let mut seen = HashSet::new();
            while let Some((t, path)) = stack.pop() {
                for next in edges(&t) {
                    if next == start {
                        return Some(path);
                    }
                    if seen.insert(next) {
                        let mut p = path.clone();
                        p.push(next);
                        stack.push((next, p));
                    }
                }
            }
        }
        None
    }
}

/// Polls the wait-for graph until a cycle appears or `timeout` passes. On a
/// cycle, every thread in it is cancelled (its pending wait unwinds with
/// [`DeadlockAbort`]) and their names are returned.
pub fn detect_deadlock(timeout: Duration) -> Option<Vec<String>> {
    detect_deadlock_until(timeout, || false)
}

/// Like [`detect_deadlock`], but gives up early once `done` returns true.
pub fn detect_deadlock_until(timeout: Duration, done: impl Fn() -> bool) -> Option<Vec<String>> {
    let deadline = Instant::now() + timeout;
    loop {
        {
            let mut g = graph().lock();
            if let Some(cycle) = g.find_cycle() {
                let names = cycle
                    .iter()
                    .map(|t| g.names.get(t).cloned().unwrap_or_else(|| format!("{t:?}")))
                    .collect();
                g.cancelled.extend(cycle);
                return Some(names);
            }
        }
        if done() || Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn watched_wait<G>(meta: &LockMeta, mut attempt: impl FnMut() -> Option<G>) -> G {
    let me = std::thread::current().id();
    {
        let mut g = graph().lock();
        g.waiting.insert(me, meta.id);
        g.names.insert(me, thread_label());
    }
    loop {
        if let Some(guard) = attempt() {
            let mut g = graph().lock();
            g.waiting.remove(&me);
            g.cancelled.remove(&me);
            g.holders.entry(meta.id).or_default().push(me);
            return guard;
        }
        let cancelled = {
            let mut g = graph().lock();
            let c = g.cancelled.remove(&me);
            if c {
                g.waiting.remove(&me);
            }
            c
        };
        if cancelled {
            std::panic::resume_unwind(Box::new(DeadlockAbort));
        }
    }
}

/// Marker popped from the thread's held set when a guard drops.
struct Held {
    id: u64,
    watched: bool,
}

impl Held {
    fn push(meta: &LockMeta) -> Self {
        HELD.with(|h| h.borrow_mut().push((meta.id, meta.gfi, meta.class)));
        Held {
            id: meta.id,
            watched: meta.cfg.watched,
        }
    }
}

impl Drop for Held {
    fn drop(&mut self) {
        HELD.with(|h| {
            let mut h = h.borrow_mut();
            if let Some(pos) = h.iter().rposition(|e| e.0 == self.id) {
                h.remove(pos);
            }
        });
        if self.watched {
            let me = std::thread::current().id();
            let mut g = graph().lock();
            if let Some(hs) = g.holders.get_mut(&self.id) {
                if let Some(pos) = hs.iter().position(|t| *t == me) {
                    hs.swap_remove(pos);
                }
            }
        }
    }
}

const WATCH_POLL: Duration = Duration::from_millis(2);

pub struct TrackedMutex<T> {
    meta: LockMeta,
    inner: parking_lot::Mutex<T>,
}

pub struct TrackedMutexGuard<'a, T> {
    // declared first so the thread's held set is updated before unlocking
    _held: Held,
    inner: parking_lot::MutexGuard<'a, T>,
}

impl<T> TrackedMutex<T> {
    pub fn new(value: T, gfi: Gfi, class: LockClass, cfg: LockConfig) -> Self {
        TrackedMutex {
            meta: LockMeta::new(gfi, class, cfg),
            inner: parking_lot::Mutex::new(value),
        }
    }

    pub fn lock(&self) -> TrackedMutexGuard<'_, T> {
        check_order(&self.meta, true);
        let inner = if self.meta.cfg.watched {
            watched_wait(&self.meta, || self.inner.try_lock_for(WATCH_POLL))
        } else {
            self.inner.lock()
        };
        TrackedMutexGuard {
            _held: Held::push(&self.meta),
            inner,
        }
    }
}

impl<T> Deref for TrackedMutexGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.inner
    }
}

impl<T> DerefMut for TrackedMutexGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.inner
    }
}

pub struct TrackedRwLock<T> {
    meta: LockMeta,
    inner: parking_lot::RwLock<T>,
}

pub struct TrackedReadGuard<'a, T> {
    _held: Held,
    inner: parking_lot::RwLockReadGuard<'a, T>,
}

pub struct TrackedWriteGuard<'a, T> {
    _held: Held,
    inner: parking_lot::RwLockWriteGuard<'a, T>,
}

impl<T> TrackedRwLock<T> {
    pub fn new(value: T, gfi: Gfi, class: LockClass, cfg: LockConfig) -> Self {
        TrackedRwLock {
            meta: LockMeta::new(gfi, class, cfg),
            inner: parking_lot::RwLock::new(value),
        }
    }

    pub fn read(&self) -> TrackedReadGuard<'_, T> {
        check_order(&self.meta, false);
        let inner = if self.meta.cfg.watched {
            watched_wait(&self.meta, || self.inner.try_read_for(WATCH_POLL))
        } else {
            self.inner.read()
        };
        TrackedReadGuard {
            _held: Held::push(&self.meta),
            inner,
        }
    }

    pub fn write(&self) -> TrackedWriteGuard<'_, T> {
        check_order(&self.meta, true);
        let inner = if self.meta.cfg.watched {
            watched_wait(&self.meta, || self.inner.try_write_for(WATCH_POLL))
        } else {
            self.inner.write()
        };
        TrackedWriteGuard {
            _held: Held::push(&self.meta),
            inner,
        }
    }
}

impl<T> Deref for TrackedReadGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.inner
    }
}

impl<T> Deref for TrackedWriteGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.inner
    }
}

impl<T> DerefMut for TrackedWriteGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.inner
    }
}
