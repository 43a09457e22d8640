//! Clock offset estimation from four-timestamp exchanges.

use std::time::{SystemTime, UNIX_EPOCH};

pub const SYNC_ROUNDS: usize = 8;

/// Wall-clock microseconds since the Unix epoch.
pub fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

/// One exchange: client send, server receive, server send, client receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncSample {
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub t4: u64,
}

impl SyncSample {
    /// Server clock minus client clock, microseconds.
    pub fn offset(&self) -> f64 {
        ((self.t2 as f64 - self.t1 as f64) + (self.t3 as f64 - self.t4 as f64)) / 2.0
    }

    pub fn round_trip(&self) -> f64 {
        (self.t4 as f64 - self.t1 as f64) - (self.t3 as f64 - self.t2 as f64)
    }
}

/// Median offset over the samples; mean of the two central values for even counts.
pub fn estimate_offset(samples: &[SyncSample]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut o: Vec<f64> = samples.iter().map(SyncSample::offset).collect();
    o.sort_by(f64::total_cmp);
    let n = o.len();
    Some(if n % 2 == 1 { o[n / 2] } else { (o[n / 2 - 1] + o[n / 2]) / 2.0 })
}

/// Result of a synchronization attempt; `offset_us` is `None` when it timed out.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockSync {
    pub offset_us: Option<f64>,
    pub samples: usize,
}

impl ClockSync {
    pub fn reliable(&self) -> bool {
        self.offset_us.is_some()
    }

    /// Maps a local timestamp onto the server clock; identity when unsynchronized.
    pub fn to_server(&self, local_us: u64) -> f64 {
        local_us as f64 + self.offset_us.unwrap_or(0.0)
    }
}
