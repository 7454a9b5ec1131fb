//! Scaled session clock.
//!
//! All protocol timestamps and timers run in *session seconds*. The clock
//! maps them onto the wall clock through a compression factor `k`
//! (`wall = k * session`, `k <= 1`), so a replay can run faster than real
//! time without touching any protocol logic. Every endpoint of one replay
//! shares the same clock, which keeps cross-endpoint timestamp comparisons
//! meaningful on a single host. With `k = 1` this is just the monotone
//! wall clock.

use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct SessionClock {
    epoch: Instant,
    scale: f64,
}

impl SessionClock {
    /// `scale` is the wall seconds per session second; must be in (0, 1].
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0 && scale <= 1.0, "scale must be in (0, 1]");
        Self {
            epoch: Instant::now(),
            scale,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Session seconds elapsed since the clock was created.
    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() / self.scale
    }

    /// Wall-clock instant at which session time `t` is reached.
    pub fn wall_at(&self, session_t: f64) -> Instant {
        self.epoch + Duration::from_secs_f64((session_t * self.scale).max(0.0))
    }

    /// Sleeps until session time `t`; returns immediately if already past.
    pub fn sleep_until(&self, session_t: f64) {
        let target = self.wall_at(session_t);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }

    pub fn sleep_s(&self, session_dt: f64) {
        if session_dt > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(session_dt * self.scale));
        }
    }

    /// Wall duration corresponding to a span of session seconds.
    pub fn wall_duration(&self, session_dt: f64) -> Duration {
        Duration::from_secs_f64((session_dt * self.scale).max(0.0))
    }
}
