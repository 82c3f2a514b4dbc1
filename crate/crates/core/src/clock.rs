//! Time sources. Tests and scenarios run on a virtual clock that only moves
//! when stepped; services and benchmarks use the system clock.

use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

use crate::model::Timestamp;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Blocks (or, for a virtual clock, advances) for `duration`.
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// A monotone clock advanced only by explicit steps.
#[derive(Debug)]
pub struct VirtualClock {
    now: Mutex<Timestamp>,
}

impl VirtualClock {
    /// 2020-01-01T00:00:00Z, the origin of all simulated timelines.
    pub fn epoch() -> Timestamp {
        Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
    }

    pub fn new() -> Self {
        Self::starting_at(Self::epoch())
    }

    pub fn starting_at(start: Timestamp) -> Self {
        VirtualClock {
            now: Mutex::new(start),
        }
    }

    pub fn advance(&self, step: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += chrono::Duration::from_std(step).expect("step out of range");
    }

    /// Moves to `target`; earlier targets are ignored so time never runs
    /// backwards.
    pub fn advance_to(&self, target: Timestamp) {
        let mut now = self.now.lock().unwrap();
        if target > *now {
            *now = target;
        }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, duration: Duration) {
        self.advance(duration);
    }
}

/// Converts simulation time-units (seconds) to an offset from `origin`.
pub fn at_offset(origin: DateTime<Utc>, units: f64) -> Timestamp {
    origin + chrono::Duration::milliseconds((units * 1000.0).round() as i64)
}
