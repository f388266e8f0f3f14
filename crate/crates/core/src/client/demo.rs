//! Scripted reproduction of the reversed-lock-order deadlock of naive
//! write-through revocation.
//!
//! Node 1 holds the write lease and has a writer parked with the kernel
//! inode guard held. Node 2 then writes, so the manager revokes node 1. The
//! naive revoker takes the daemon lease guard first and then wants the
//! inode guard; the writer, once released, wants the daemon lease guard.
//! The OCC revoker never holds the daemon guard while invalidating, so the
//! same script completes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::cluster::{Cluster, ClusterConfig};
use crate::error::{Error, Result};
use crate::lockorder::{detect_deadlock_until, LockConfig, OrderPolicy, WATCHDOG_TIMEOUT};
use crate::manager::ManagerConfig;
use crate::types::{CacheMode, PageData};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DemoOutcome {
    /// The watchdog found a wait cycle; names the threads in it.
    DeadlockDetected { cycle: Vec<String>, after: Duration },
    Completed { after: Duration },
}

impl DemoOutcome {
    pub fn is_deadlock(&self) -> bool {
        matches!(self, DemoOutcome::DeadlockDetected { .. })
    }
}

/// Two-node run of the script.
pub fn deadlock_demo(naive: bool) -> Result<DemoOutcome> {
    deadlock_demo_nodes(naive, 2)
}

/// Runs the script on `nodes` nodes; with one node there is no remote
/// revoker and the writer simply finishes.
pub fn deadlock_demo_nodes(naive: bool, nodes: usize) -> Result<DemoOutcome> {
    let mut cfg = ClusterConfig::new(CacheMode::WriteThroughOcc, nodes.max(1));
    cfg.client.naive_revoke = naive;
    cfg.client.flusher = false;
    cfg.client.locks = LockConfig {
        policy: OrderPolicy::Record,
        watched: true,
    };
    cfg.manager = ManagerConfig {
        retry_limit: 3,
        backoff: Duration::from_millis(10),
    };
    let cluster = Cluster::new(cfg)?;
    let writer = cluster.node(1).clone();
    let fd = writer.open("demo", true)?;
    let gfi = writer.gfi(fd)?;
    writer.write_page(gfi, 0, &PageData::patterned(1))?;

    let probes = cluster.probes().clone();
    let finished = Arc::new(AtomicUsize::new(0));
    let mut threads = Vec::new();
    let started = Instant::now();

    let park_writer = probes.arm("write.after_inode_guard");
    {
        let finished = finished.clone();
        threads.push(
            std::thread::Builder::new()
                .name("n1.writer".into())
                .spawn(move || {
                    let r = writer.write_page(gfi, 0, &PageData::patterned(2));
                    finished.fetch_add(1, Ordering::AcqRel);
                    r
                })
                .expect("spawn writer"),
        );
    }
    if !park_writer.wait_reached(WATCHDOG_TIMEOUT) {
        return Err(Error::Protocol("writer never reached the inode guard".into()));
    }

    if nodes >= 2 {
        let park_revoker = probes.arm("revoke.before_invalidate");
        let contender = cluster.node(2).clone();
        let finished = finished.clone();
        threads.push(
            std::thread::Builder::new()
                .name("n2.writer".into())
                .spawn(move || {
                    let r = contender.write_page(gfi, 0, &PageData::patterned(3));
                    finished.fetch_add(1, Ordering::AcqRel);
                    r
                })
                .expect("spawn contender"),
        );
        if !park_revoker.wait_reached(WATCHDOG_TIMEOUT) {
            return Err(Error::Protocol("revocation never reached node 1".into()));
        }
        park_revoker.release();
    }
    park_writer.release();

    let total = threads.len();
    let cycle = detect_deadlock_until(WATCHDOG_TIMEOUT, || finished.load(Ordering::Acquire) == total);
    let after = started.elapsed();
    for t in threads {
        // a cancelled writer unwinds; its result is not interesting
        let _ = t.join();
    }
    match cycle {
        Some(cycle) => Ok(DemoOutcome::DeadlockDetected { cycle, after }),
        None if finished.load(Ordering::Acquire) == total => Ok(DemoOutcome::Completed { after }),
        None => Err(Error::Protocol("script neither completed nor deadlocked".into())),
    }
}
