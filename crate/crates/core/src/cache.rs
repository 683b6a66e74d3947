//! Time-windowed reading ring shared by the pusher's per-sensor cache and
//! the collect agent's per-sensor-id cache.

use std::collections::VecDeque;

/// Ring of the most recent readings of one sensor.
///
/// Eviction is driven by inserts: after an insert, every entry whose
/// timestamp is older than `newest - window_ns` is gone. The entry exactly
/// at the window edge survives, so a 120 s window sampled at 1 Hz holds
/// 121 entries.
#[derive(Debug, Clone)]
pub struct SensorCache {
    window_ns: u64,
    entries: VecDeque<(u64, i64)>,
}

impl SensorCache {
    pub fn new(window_ns: u64) -> SensorCache {
        SensorCache { window_ns, entries: VecDeque::new() }
    }

    pub fn window_ns(&self) -> u64 {
        self.window_ns
    }

    /// Inserts keeping entries timestamp-sorted; an insert with an already
    /// present timestamp replaces that value (last write wins).
    pub fn insert(&mut self, ts: u64, value: i64) {
        let mut at = self.entries.len();
        while at > 0 && self.entries[at - 1].0 > ts {
            at -= 1;
        }
        if at > 0 && self.entries[at - 1].0 == ts {
            self.entries[at - 1].1 = value;
        } else {
            self.entries.insert(at, (ts, value));
        }
        let newest = self.entries.back().map(|e| e.0).unwrap_or(0);
        let min_keep = newest.saturating_sub(self.window_ns);
        while let Some(&(front_ts, _)) = self.entries.front() {
            if front_ts < min_keep {
                self.entries.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn latest(&self) -> Option<(u64, i64)> {
        self.entries.back().copied()
    }

    /// Mean of raw values with timestamp strictly newer than
    /// `newest - window_ns` (the query window is capped at the ring window).
    pub fn average(&self, window_ns: u64) -> Option<f64> {
        let newest = self.entries.back()?.0;
        let window = window_ns.min(self.window_ns);
        let min_keep = newest.saturating_sub(window);
        let mut sum = 0i128;
        let mut n = 0u64;
        for &(ts, v) in self.entries.iter().rev() {
            if ts <= min_keep {
                break;
            }
            sum += v as i128;
            n += 1;
        }
        if n == 0 {
            None
        } else {
            Some(sum as f64 / n as f64)
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, i64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
