use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverloadConfig {
    /// Sustainable arrivals per second.
    pub capacity_rps: f64,
    /// Shedding starts above this fraction of capacity.
    pub capacity_fraction: f64,
    /// Also overloaded when the re-rank p95 queue wait exceeds this.
    pub queue_wait_ms: f64,
    /// Arrival-rate averaging window.
    pub window_s: f64,
    /// Force shedding regardless of load.
    pub force: bool,
}

impl Default for OverloadConfig {
    fn default() -> Self {
        Self {
            capacity_rps: 1000.0,
            capacity_fraction: 0.8,
            queue_wait_ms: 50.0,
            window_s: 1.0,
            force: false,
        }
    }
}

/// Sliding-window arrival-rate meter that reports overload and headroom.
#[derive(Debug)]
pub struct OverloadDetector {
    config: OverloadConfig,
    arrivals: Mutex<VecDeque<f64>>,
    queue_wait_ms: AtomicU64,
}

impl OverloadDetector {
    pub fn new(config: OverloadConfig) -> Self {
        Self {
            config,
            arrivals: Mutex::new(VecDeque::new()),
            queue_wait_ms: AtomicU64::new(0f64.to_bits()),
        }
    }

    pub fn config(&self) -> &OverloadConfig {
        &self.config
    }

    /// Records an arrival at `now` (seconds) and returns the current rate.
    pub fn arrive(&self, now: f64) -> f64 {
        let mut q = self.arrivals.lock();
        q.push_back(now);
        let w = self.config.window_s.max(1e-6);
        while q.front().is_some_and(|&t| t <= now - w) {
            q.pop_front();
        }
        q.len() as f64 / w
    }

    pub fn rate(&self) -> f64 {
        self.arrivals.lock().len() as f64 / self.config.window_s.max(1e-6)
    }

    pub fn observe_queue_wait(&self, p95_ms: f64) {
        self.queue_wait_ms.store(p95_ms.to_bits(), Ordering::Relaxed);
    }

    /// Remaining headroom `1 - rate / capacity`, clamped to [0, 1].
    pub fn quota(&self, rate: f64) -> f64 {
        if self.config.capacity_rps <= 0.0 {
            return 0.0;
        }
        (1.0 - rate / self.config.capacity_rps).clamp(0.0, 1.0)
    }

    pub fn overloaded(&self, rate: f64) -> bool {
        self.config.force
            || rate > self.config.capacity_fraction * self.config.capacity_rps
            || f64::from_bits(self.queue_wait_ms.load(Ordering::Relaxed)) > self.config.queue_wait_ms
    }
}

const HIST_BUCKETS: usize = 10;

/// Last cutoff fraction (a feature of the next decision) plus a histogram of
/// cutoff fractions for metrics.
#[derive(Debug, Default)]
pub struct CutoffTracker {
    prev: AtomicU64,
    decisions: AtomicU64,
    shed_decisions: AtomicU64,
    fraction_sum_micros: AtomicU64,
    histogram: [AtomicU64; HIST_BUCKETS],
}

impl CutoffTracker {
    pub fn previous(&self) -> f64 {
        f64::from_bits(self.prev.load(Ordering::Relaxed))
    }

    pub fn record(&self, cutoff_fraction: f64) {
        let f = cutoff_fraction.clamp(0.0, 1.0);
        self.prev.store(f.to_bits(), Ordering::Relaxed);
        self.decisions.fetch_add(1, Ordering::Relaxed);
        if f > 0.0 {
            self.shed_decisions.fetch_add(1, Ordering::Relaxed);
        }
        self.fraction_sum_micros.fetch_add((f * 1e6).round() as u64, Ordering::Relaxed);
        let b = ((f * HIST_BUCKETS as f64) as usize).min(HIST_BUCKETS - 1);
        self.histogram[b].fetch_add(1, Ordering::Relaxed);
    }

    pub fn decisions(&self) -> u64 {
        self.decisions.load(Ordering::Relaxed)
    }

    pub fn shed_decisions(&self) -> u64 {
        self.shed_decisions.load(Ordering::Relaxed)
    }

    pub fn mean_cutoff(&self) -> f64 {
        let n = self.decisions();
        if n == 0 {
            0.0
        } else {
            self.fraction_sum_micros.load(Ordering::Relaxed) as f64 / 1e6 / n as f64
        }
    }

    /// Counts per tenth of the [0, 1] cutoff range.
    pub fn histogram(&self) -> [u64; HIST_BUCKETS] {
        std::array::from_fn(|i| self.histogram[i].load(Ordering::Relaxed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_and_quota() {
        let d = OverloadDetector::new(OverloadConfig {
            capacity_rps: 10.0,
            ..Default::default()
        });
        let mut rate = 0.0;
        for i in 0..9 {
            rate = d.arrive(i as f64 * 0.1);
        }
        assert_eq!(rate, 9.0);
        assert!(d.overloaded(rate));
        assert!((d.quota(rate) - 0.1).abs() < 1e-12);
        let rate = d.arrive(5.0);
        assert_eq!(rate, 1.0);
        assert!(!d.overloaded(rate));
    }

    #[test]
    fn tracker_histogram() {
        let t = CutoffTracker::default();
        t.record(0.0);
        t.record(0.55);
        assert_eq!(t.previous(), 0.55);
        assert_eq!(t.histogram()[5], 1);
        assert_eq!(t.shed_decisions(), 1);
        assert!((t.mean_cutoff() - 0.275).abs() < 1e-9);
    }
}
