use std::time::{Duration, Instant};

/// Time source for the tick loop.
pub trait Clock: Send {
    /// Seconds since the clock was created.
    fn now_s(&self) -> f64;

    /// Blocks (or advances) until the next tick boundary.
    fn wait_tick(&mut self, period_s: f64);
}

/// Wall-clock ticking with fixed deadlines, so work done inside a tick does
/// not stretch the period.
#[derive(Debug)]
pub struct RealtimeClock {
    start: Instant,
    next: Instant,
}

impl RealtimeClock {
    pub fn new() -> Self {
        let now = Instant::now();
        Self { start: now, next: now }
    }
}

impl Default for RealtimeClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealtimeClock {
    fn now_s(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn wait_tick(&mut self, period_s: f64) {
        self.next += Duration::from_secs_f64(period_s);
        let now = Instant::now();
        if self.next > now {
            std::thread::sleep(self.next - now);
        } else {
            // overran: do not try to catch up with a burst of ticks
            self.next = now;
        }
    }
}

/// Simulated time that advances by exactly one period per tick.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    t: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now_s(&self) -> f64 {
        self.t
    }

    fn wait_tick(&mut self, period_s: f64) {
        self.t += period_s;
    }
}
