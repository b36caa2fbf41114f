//! Virtual time.
//!
//! The engine keeps time as an integer count of femtoseconds so that sums of
//! durations are exact regardless of accumulation order. At that resolution
//! a 0.1 ms iterate is represented to about 1e-11 relative error, and the
//! 128-bit counter never overflows in practice.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

const FS_PER_SECOND: f64 = 1e15;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u128);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    /// Rounds a non-negative duration in seconds to the nearest femtosecond.
    pub fn from_secs(secs: f64) -> SimTime {
        debug_assert!(secs >= 0.0 && secs.is_finite(), "bad duration {secs}");
        SimTime((secs.max(0.0) * FS_PER_SECOND).round() as u128)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / FS_PER_SECOND
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs())
    }
}
