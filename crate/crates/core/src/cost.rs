//! Simulated per-operation costs.
//!
//! In-process nodes share one address space and, on small machines, one
//! core. Charging fixed sleeps for the expensive boundaries (entering the
//! file system, a kernel/daemon crossing, a network round trip) makes the
//! relative cost structure of the modes visible and lets independent nodes
//! overlap their waits the way separate machines would.

use std::time::Duration;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    /// Charged once per facade call (read, write, fsync).
    pub syscall: Duration,
    /// Charged per kernel-to-daemon round trip.
    pub crossing: Duration,
    /// Charged per RPC on a loopback link.
    pub rpc: Duration,
}

impl CostModel {
    pub const fn zero() -> Self {
        CostModel {
            syscall: Duration::ZERO,
            crossing: Duration::ZERO,
            rpc: Duration::ZERO,
        }
    }

    /// Defaults used by the benchmark driver.
    pub const fn desk() -> Self {
        CostModel {
            syscall: Duration::from_micros(400),
            crossing: Duration::from_micros(300),
            rpc: Duration::from_micros(400),
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::zero()
    }
}

pub(crate) fn charge(d: Duration) {
    if !d.is_zero() {
        std::thread::sleep(d);
    }
}
