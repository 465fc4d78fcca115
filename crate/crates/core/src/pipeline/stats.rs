use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;

const LATENCY_WINDOW: usize = 4096;

/// Live counters for one stage processor.
#[derive(Debug)]
pub struct StageStats {
    pub(crate) invocations: AtomicU64,
    pub(crate) events_in: AtomicU64,
    pub(crate) events_out: AtomicU64,
    pub(crate) failures: AtomicU64,
    pub(crate) cpu_ns: AtomicU64,
    pub(crate) busy_ns: AtomicU64,
    pub(crate) max_depth: AtomicU64,
    latency_sum_us: AtomicU64,
    latency_count: AtomicU64,
    recent_us: Mutex<VecDeque<u64>>,
}

impl Default for StageStats {
    fn default() -> Self {
        Self {
            invocations: AtomicU64::new(0),
            events_in: AtomicU64::new(0),
            events_out: AtomicU64::new(0),
            failures: AtomicU64::new(0),
            cpu_ns: AtomicU64::new(0),
            busy_ns: AtomicU64::new(0),
            max_depth: AtomicU64::new(0),
            latency_sum_us: AtomicU64::new(0),
            latency_count: AtomicU64::new(0),
            recent_us: Mutex::new(VecDeque::with_capacity(LATENCY_WINDOW)),
        }
    }
}

impl StageStats {
    pub(crate) fn record_latency(&self, us: u64) {
        self.latency_sum_us.fetch_add(us, Ordering::Relaxed);
        self.latency_count.fetch_add(1, Ordering::Relaxed);
        let mut recent = self.recent_us.lock();
        if recent.len() == LATENCY_WINDOW {
            recent.pop_front();
        }
        recent.push_back(us);
    }

    pub(crate) fn observe_depth(&self, depth: usize) {
        self.max_depth.fetch_max(depth as u64, Ordering::Relaxed);
    }

    pub(crate) fn add_cpu(&self, cpu: Duration, wall: Duration) {
        self.cpu_ns.fetch_add(cpu.as_nanos() as u64, Ordering::Relaxed);
        self.busy_ns.fetch_add(wall.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self, stage: &str, queue_depth: usize, capacity: usize) -> StageSnapshot {
        let mut recent: Vec<u64> = self.recent_us.lock().iter().copied().collect();
        recent.sort_unstable();
        let q = |p: f64| -> f64 {
            if recent.is_empty() {
                return 0.0;
            }
            let idx = ((recent.len() - 1) as f64 * p).round() as usize;
            recent[idx] as f64 / 1000.0
        };
        let count = self.latency_count.load(Ordering::Relaxed);
        StageSnapshot {
            stage: stage.to_string(),
            invocations: self.invocations.load(Ordering::Relaxed),
            events_in: self.events_in.load(Ordering::Relaxed),
            events_out: self.events_out.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            cpu_seconds: self.cpu_ns.load(Ordering::Relaxed) as f64 / 1e9,
            busy_seconds: self.busy_ns.load(Ordering::Relaxed) as f64 / 1e9,
            mean_latency_ms: if count == 0 {
                0.0
            } else {
                self.latency_sum_us.load(Ordering::Relaxed) as f64 / count as f64 / 1000.0
            },
            p50_latency_ms: q(0.50),
            p95_latency_ms: q(0.95),
            p99_latency_ms: q(0.99),
            queue_depth,
            max_queue_depth: self.max_depth.load(Ordering::Relaxed) as usize,
            channel_capacity: capacity,
        }
    }
}

/// Point-in-time view of a stage. Latency is enqueue-to-finish per event.
#[derive(Debug, Clone, Serialize)]
pub struct StageSnapshot {
    pub stage: String,
    pub invocations: u64,
    pub events_in: u64,
    pub events_out: u64,
    pub failures: u64,
    pub cpu_seconds: f64,
    pub busy_seconds: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub queue_depth: usize,
    pub max_queue_depth: usize,
    pub channel_capacity: usize,
}
