use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;

use super::{TraceRecord, WorkloadError};
use crate::request::{FeedbackEvent, InferenceRequest};

/// Summary of one served request, as seen by the replayer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayResponse {
    pub scored: usize,
    pub shed: usize,
    pub cache_hits: usize,
}

pub type ReplayCallback = Box<dyn FnOnce(Result<ReplayResponse, String>) + Send>;

/// Something a trace can be replayed against. `trace_time` is the record's
/// timestamp and drives time-based cache semantics.
pub trait ReplayTarget: Send + Sync {
    fn ready(&self) -> bool {
        true
    }

    fn feedback(&self, event: &FeedbackEvent);

    fn submit(&self, request: InferenceRequest, trace_time: f64, done: ReplayCallback);

    /// Target-specific counters merged into the metrics.
    fn extra_metrics(&self) -> serde_json::Map<String, serde_json::Value> {
        serde_json::Map::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReplayOptions {
    /// Trace seconds per wall second; 0 issues as fast as possible.
    pub speed: f64,
    pub max_in_flight: usize,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            speed: 0.0,
            max_in_flight: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayMetrics {
    pub requests: usize,
    pub completed: usize,
    pub failed: usize,
    pub wall_seconds: f64,
    /// Completed requests per wall second.
    pub throughput_rps: f64,
    pub latency: LatencySummary,
    /// (upper bound in ms, count); the last bucket is unbounded.
    pub latency_histogram: Vec<(f64, usize)>,
    pub scored_items: usize,
    pub shed_items: usize,
    pub query_cache_hits: usize,
    pub first_error: Option<String>,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

const BUCKETS_MS: [f64; 12] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, f64::INFINITY];

#[derive(Default)]
struct Tally {
    in_flight: usize,
    latencies_ms: Vec<f64>,
    completed: usize,
    failed: usize,
    scored: usize,
    shed: usize,
    hits: usize,
    first_error: Option<String>,
}

/// Issues every record against `target`, pacing by trace timestamps when
/// `speed > 0`, and waits for all responses.
pub fn replay(
    records: &[TraceRecord],
    target: &Arc<dyn ReplayTarget>,
    options: ReplayOptions,
) -> Result<ReplayMetrics, WorkloadError> {
    if !target.ready() {
        return Err(WorkloadError::PipelineUnavailable);
    }
    let state = Arc::new((Mutex::new(Tally::default()), Condvar::new()));
    let cap = options.max_in_flight.max(1);
    let start = Instant::now();
    let t0 = records.first().map(|r| r.ts).unwrap_or(0.0);
    for rec in records {
        if options.speed > 0.0 {
            let due = start + Duration::from_secs_f64(((rec.ts - t0) / options.speed).max(0.0));
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        for fb in &rec.feedback {
            target.feedback(fb);
        }
        {
            let (lock, cv) = &*state;
            let mut tally = lock.lock();
            while tally.in_flight >= cap {
                cv.wait(&mut tally);
            }
            tally.in_flight += 1;
        }
        let issued = Instant::now();
        let st = Arc::clone(&state);
        target.submit(
            rec.request.clone(),
            rec.ts,
            Box::new(move |outcome| {
                let ms = issued.elapsed().as_secs_f64() * 1e3;
                let (lock, cv) = &*st;
                let mut tally = lock.lock();
                tally.in_flight -= 1;
                match outcome {
                    Ok(r) => {
                        tally.completed += 1;
                        tally.latencies_ms.push(ms);
                        tally.scored += r.scored;
                        tally.shed += r.shed;
                        tally.hits += r.cache_hits;
                    }
                    Err(e) => {
                        tally.failed += 1;
                        tally.first_error.get_or_insert(e);
                    }
                }
                cv.notify_all();
            }),
        );
    }
    let (lock, cv) = &*state;
    let mut tally = lock.lock();
    while tally.in_flight > 0 {
        cv.wait(&mut tally);
    }
    let wall = start.elapsed().as_secs_f64();
    let mut lat = std::mem::take(&mut tally.latencies_ms);
    lat.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if lat.is_empty() {
            0.0
        } else {
            lat[((lat.len() - 1) as f64 * p).round() as usize]
        }
    };
    let histogram = BUCKETS_MS
        .iter()
        .scan(0usize, |lo, &ub| {
            let hi = lat.partition_point(|&x| x <= ub);
            let count = hi - *lo;
            *lo = hi;
            Some((ub, count))
        })
        .collect();
    Ok(ReplayMetrics {
        requests: records.len(),
        completed: tally.completed,
        failed: tally.failed,
        wall_seconds: wall,
        throughput_rps: if wall > 0.0 { tally.completed as f64 / wall } else { 0.0 },
        latency: LatencySummary {
            mean_ms: if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 },
            p50_ms: q(0.5),
            p95_ms: q(0.95),
            p99_ms: q(0.99),
            max_ms: lat.last().copied().unwrap_or(0.0),
        },
        latency_histogram: histogram,
        scored_items: tally.scored,
        shed_items: tally.shed,
        query_cache_hits: tally.hits,
        first_error: tally.first_error.take(),
        extra: target.extra_metrics(),
    })
}
