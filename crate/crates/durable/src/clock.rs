use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Time source for event timestamps and retry backoff, in milliseconds
/// since the clock was created.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    /// Virtual clocks jump forward when nothing can make progress; real
    /// clocks wait.
    fn is_virtual(&self) -> bool {
        false
    }

    /// Moves a virtual clock forward to `ms`; a no-op for real time.
    fn advance_to(&self, _ms: u64) {}
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Simulated time that only moves when advanced, either explicitly or by
/// the engine when every pending task is waiting on a backoff.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_by(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn is_virtual(&self) -> bool {
        true
    }

    fn advance_to(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::SeqCst);
    }
}
