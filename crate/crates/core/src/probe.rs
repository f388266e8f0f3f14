//! Named pause points for scripted interleavings.
//!
//! Code under test calls [`Probes::hit`] at interesting places. A test arms a
//! point, waits until some thread reaches it, does whatever it wants while
//! that thread is parked, then releases it. Unarmed points cost one atomic
//! load.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// How long a parked thread waits for its release before giving up.
const PARK_LIMIT: Duration = Duration::from_secs(30);

#[derive(Default)]
struct PointState {
    armed: bool,
    reached: bool,
    released: bool,
}

#[derive(Default)]
struct Point {
    state: Mutex<PointState>,
    cv: Condvar,
}

#[derive(Default)]
pub struct Probes {
    armed: AtomicUsize,
    points: Mutex<HashMap<&'static str, Arc<Point>>>,
}

/// Test-side handle of an armed point.
pub struct Armed {
    point: Arc<Point>,
}

impl Probes {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Arms `name` for one hit: the first thread to reach it parks until the
    /// returned handle is released (or dropped).
    pub fn arm(&self, name: &'static str) -> Armed {
        let point = Arc::new(Point::default());
        point.state.lock().armed = true;
        self.points.lock().insert(name, point.clone());
        self.armed.fetch_add(1, Ordering::AcqRel);
        Armed { point }
    }

    pub fn hit(&self, name: &'static str) {
        if self.armed.load(Ordering::Acquire) == 0 {
            return;
        }
        let point = match self.points.lock().get(name) {
            Some(p) => p.clone(),
            None => return,
        };
        let mut st = point.state.lock();
        if !st.armed {
            return;
        }
        st.armed = false;
        self.armed.fetch_sub(1, Ordering::AcqRel);
        st.reached = true;
        point.cv.notify_all();
        let deadline = Instant::now() + PARK_LIMIT;
        while !st.released {
            if point.cv.wait_until(&mut st, deadline).timed_out() {
                break;
            }
        }
    }
}

impl Armed {
    /// Blocks until a thread parks at the point or `timeout` passes.
    pub fn wait_reached(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.point.state.lock();
        while !st.reached {
            if self.point.cv.wait_until(&mut st, deadline).timed_out() {
                return st.reached;
            }
        }
        true
    }

    pub fn release(&self) {
        let mut st = self.point.state.lock();
        st.released = true;
        self.point.cv.notify_all();
    }
}

impl Drop for Armed {
    fn drop(&mut self) {
        self.release();
    }
}
