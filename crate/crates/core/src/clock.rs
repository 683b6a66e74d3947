//! Time sources. Daemons run on the system clock; engine-level tests drive
//! a simulated clock through the same trait.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Nanoseconds since the UNIX epoch (or since simulation start).
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ns(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before epoch")
            .as_nanos() as u64
    }
}

/// Manually advanced clock for deterministic tests.
///
/// Drivers must move time through every due tick in order (set/advance in
/// steps no larger than the smallest sampling interval); real time never
/// jumps, and tick accounting assumes it does not either.
#[derive(Debug, Default)]
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new(start_ns: u64) -> SimClock {
        SimClock { now: AtomicU64::new(start_ns) }
    }

    pub fn set(&self, ns: u64) {
        self.now.store(ns, Ordering::SeqCst);
    }

    pub fn advance(&self, delta_ns: u64) -> u64 {
        self.now.fetch_add(delta_ns, Ordering::SeqCst) + delta_ns
    }
}

impl Clock for SimClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// Condvar wrapper daemon threads park on; control-plane actions poke it so
/// schedule changes take effect before the previous sleep would have ended.
#[derive(Debug, Default)]
pub struct Waker {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl Waker {
    pub fn new() -> Waker {
        Waker::default()
    }

    pub fn notify(&self) {
        let mut g = self.generation.lock().unwrap();
        *g += 1;
        self.cv.notify_all();
    }

    /// Sleeps up to `timeout` or until the next `notify`, whichever is first.
    pub fn wait_timeout(&self, timeout: Duration) {
        let g = self.generation.lock().unwrap();
        let start = *g;
        let _unused = self
            .cv
            .wait_timeout_while(g, timeout, |g| *g == start)
            .unwrap();
    }
}
