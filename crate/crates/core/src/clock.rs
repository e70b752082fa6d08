//! Engine clocks. Timestamps are integer milliseconds since engine start.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::model::Millis;

pub trait Clock: Send + Sync {
    /// Milliseconds since the engine epoch.
    fn now_ms(&self) -> Millis;
    /// Monotonic microseconds, used for access-time accounting.
    fn now_us(&self) -> u64;
}

#[derive(Debug)]
pub struct SystemClock {
    epoch: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> Millis {
        self.epoch.elapsed().as_millis() as Millis
    }

    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }
}

/// Hand-driven clock for deterministic tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    us: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: Millis) -> Self {
        Self {
            us: AtomicU64::new(start_ms * 1000),
        }
    }

    pub fn set_ms(&self, ms: Millis) {
        self.us.store(ms * 1000, Ordering::SeqCst);
    }

    pub fn advance_ms(&self, ms: u64) {
        self.us.fetch_add(ms * 1000, Ordering::SeqCst);
    }

    pub fn advance_us(&self, us: u64) {
        self.us.fetch_add(us, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> Millis {
        self.us.load(Ordering::SeqCst) / 1000
    }

    fn now_us(&self) -> u64 {
        self.us.load(Ordering::SeqCst)
    }
}
