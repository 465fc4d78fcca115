use std::fmt::Write;
use std::sync::atomic::Ordering;

use serde::{Deserialize, Serialize};

use super::ServingStack;
use crate::pipeline::StageSnapshot;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeCacheMetrics {
    pub lookups: u64,
    pub memory_hits: u64,
    pub disk_hits: u64,
    pub backing_fetches: u64,
    pub hit_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryCacheMetrics {
    pub enabled: bool,
    pub hits: u64,
    pub misses: u64,
    pub rejected: u64,
    pub invalidated: u64,
    pub entries: usize,
    pub hit_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShedMetrics {
    pub enabled: bool,
    pub decisions: u64,
    pub shed_decisions: u64,
    pub shed_items: u64,
    pub mean_cutoff: f64,
    pub last_cutoff: f64,
    pub cutoff_histogram: Vec<u64>,
}

/// Point-in-time counters of a stack. The text exposition is rendered from
/// this, so reports and the metrics endpoint agree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackMetrics {
    pub generation: u64,
    pub uptime_s: f64,
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    pub throughput_rps: f64,
    pub cube_cache: CubeCacheMetrics,
    pub query_cache: QueryCacheMetrics,
    pub scorer_items: u64,
    pub scorer_batches: u64,
    pub mixed_generation_batches: u64,
    pub shedding: ShedMetrics,
    pub reloads: u64,
    pub reload_failures: u64,
    /// Operator CPU time summed over stages.
    pub cpu_seconds: f64,
    /// Item-head pairs produced, by the scorer or the query cache.
    pub scored_pairs: u64,
    /// CPU seconds per 10^6 scored pairs.
    pub cpu_cost: f64,
    pub stages: Vec<StageSnapshotOwned>,
}

/// Serialisable copy of a stage snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshotOwned {
    pub stage: String,
    pub invocations: u64,
    pub events_in: u64,
    pub events_out: u64,
    pub failures: u64,
    pub cpu_seconds: f64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub queue_depth: usize,
    pub max_queue_depth: usize,
}

impl From<&StageSnapshot> for StageSnapshotOwned {
    fn from(s: &StageSnapshot) -> Self {
        Self {
            stage: s.stage.clone(),
            invocations: s.invocations,
            events_in: s.events_in,
            events_out: s.events_out,
            failures: s.failures,
            cpu_seconds: s.cpu_seconds,
            mean_latency_ms: s.mean_latency_ms,
            p50_latency_ms: s.p50_latency_ms,
            p95_latency_ms: s.p95_latency_ms,
            p99_latency_ms: s.p99_latency_ms,
            queue_depth: s.queue_depth,
            max_queue_depth: s.max_queue_depth,
        }
    }
}

pub(crate) fn collect(stack: &ServingStack) -> StackMetrics {
    let p = stack.pipeline();
    let uptime_s = stack.clock();
    let cc = stack.cube_counters();
    let lookups = cc.lookups.load(Ordering::Relaxed);
    let memory_hits = cc.memory_hits.load(Ordering::Relaxed);
    let disk_hits = cc.disk_hits.load(Ordering::Relaxed);
    let cube_cache = CubeCacheMetrics {
        lookups,
        memory_hits,
        disk_hits,
        backing_fetches: cc.backing_fetches.load(Ordering::Relaxed),
        hit_ratio: if lookups == 0 { 0.0 } else { (memory_hits + disk_hits) as f64 / lookups as f64 },
    };
    let query_cache = stack.query_cache().map_or_else(QueryCacheMetrics::default, |q| QueryCacheMetrics {
        enabled: true,
        hits: q.hits(),
        misses: q.misses(),
        rejected: q.rejected(),
        invalidated: q.invalidated(),
        entries: q.len(),
        hit_ratio: q.hit_ratio(),
    });
    let c = stack.counters();
    let shedding = stack.shed_state().map_or_else(ShedMetrics::default, |s| ShedMetrics {
        enabled: true,
        decisions: s.tracker.decisions(),
        shed_decisions: s.tracker.shed_decisions(),
        shed_items: c.shed_items.load(Ordering::Relaxed),
        mean_cutoff: s.tracker.mean_cutoff(),
        last_cutoff: s.tracker.previous(),
        cutoff_histogram: s.tracker.histogram().to_vec(),
    });
    let stages: Vec<StageSnapshotOwned> = p.stage_stats().iter().map(Into::into).collect();
    let cpu_seconds: f64 = stages.iter().map(|s| s.cpu_seconds).sum();
    let scorer_items = c.scorer_items.load(Ordering::Relaxed);
    let scored_pairs = scorer_items + query_cache.hits;
    let completed = p.completed();
    let loader = stack.loader();
    StackMetrics {
        generation: stack.generation(),
        uptime_s,
        requests: p.submitted(),
        completed,
        failed: p.failed(),
        throughput_rps: if uptime_s > 0.0 { completed as f64 / uptime_s } else { 0.0 },
        cube_cache,
        query_cache,
        scorer_items,
        scorer_batches: c.scorer_batches.load(Ordering::Relaxed),
        mixed_generation_batches: c.mixed_generation_batches.load(Ordering::Relaxed),
        shedding,
        reloads: loader.reloads.load(Ordering::Relaxed),
        reload_failures: loader.reload_failures.load(Ordering::Relaxed),
        cpu_seconds,
        scored_pairs,
        cpu_cost: if scored_pairs == 0 { 0.0 } else { cpu_seconds / scored_pairs as f64 * 1e6 },
        stages,
    }
}

/// Prometheus-style text exposition.
pub fn render(m: &StackMetrics) -> String {
    let mut s = String::new();
    let mut line = |name: &str, kind: &str, v: f64| {
        let _ = writeln!(s, "# TYPE {name} {kind}\n{name} {v}");
    };
    line("rankserve_generation", "gauge", m.generation as f64);
    line("rankserve_uptime_seconds", "gauge", m.uptime_s);
    line("rankserve_requests_total", "counter", m.requests as f64);
    line("rankserve_requests_completed_total", "counter", m.completed as f64);
    line("rankserve_requests_failed_total", "counter", m.failed as f64);
    line("rankserve_throughput_rps", "gauge", m.throughput_rps);
    line("rankserve_cube_cache_lookups_total", "counter", m.cube_cache.lookups as f64);
    line("rankserve_cube_cache_memory_hits_total", "counter", m.cube_cache.memory_hits as f64);
    line("rankserve_cube_cache_disk_hits_total", "counter", m.cube_cache.disk_hits as f64);
    line("rankserve_cube_cache_backing_fetches_total", "counter", m.cube_cache.backing_fetches as f64);
    line("rankserve_cube_cache_hit_ratio", "gauge", m.cube_cache.hit_ratio);
    line("rankserve_query_cache_hits_total", "counter", m.query_cache.hits as f64);
    line("rankserve_query_cache_misses_total", "counter", m.query_cache.misses as f64);
    line("rankserve_query_cache_rejected_total", "counter", m.query_cache.rejected as f64);
    line("rankserve_query_cache_invalidated_total", "counter", m.query_cache.invalidated as f64);
    line("rankserve_query_cache_entries", "gauge", m.query_cache.entries as f64);
    line("rankserve_query_cache_hit_ratio", "gauge", m.query_cache.hit_ratio);
    line("rankserve_scorer_items_total", "counter", m.scorer_items as f64);
    line("rankserve_scorer_batches_total", "counter", m.scorer_batches as f64);
    line("rankserve_mixed_generation_batches_total", "counter", m.mixed_generation_batches as f64);
    line("rankserve_shed_decisions_total", "counter", m.shedding.decisions as f64);
    line("rankserve_shed_items_total", "counter", m.shedding.shed_items as f64);
    line("rankserve_cutoff_fraction_mean", "gauge", m.shedding.mean_cutoff);
    line("rankserve_cutoff_fraction_last", "gauge", m.shedding.last_cutoff);
    line("rankserve_reloads_total", "counter", m.reloads as f64);
    line("rankserve_reload_failures_total", "counter", m.reload_failures as f64);
    line("rankserve_cpu_seconds_total", "counter", m.cpu_seconds);
    line("rankserve_scored_pairs_total", "counter", m.scored_pairs as f64);
    line("rankserve_cpu_cost", "gauge", m.cpu_cost);
    let _ = writeln!(s, "# TYPE rankserve_stage_latency_ms summary");
    for st in &m.stages {
        for (q, v) in [("0.5", st.p50_latency_ms), ("0.95", st.p95_latency_ms), ("0.99", st.p99_latency_ms)] {
            let _ = writeln!(s, "rankserve_stage_latency_ms{{stage=\"{}\",quantile=\"{q}\"}} {v}", st.stage);
        }
    }
    for (name, kind, f) in [
        ("rankserve_stage_queue_depth", "gauge", (|st: &StageSnapshotOwned| st.queue_depth as f64) as fn(&StageSnapshotOwned) -> f64),
        ("rankserve_stage_events_total", "counter", |st| st.events_in as f64),
        ("rankserve_stage_invocations_total", "counter", |st| st.invocations as f64),
        ("rankserve_stage_cpu_seconds_total", "counter", |st| st.cpu_seconds),
    ] {
        let _ = writeln!(s, "# TYPE {name} {kind}");
        for st in &m.stages {
            let _ = writeln!(s, "{name}{{stage=\"{}\"}} {}", st.stage, f(st));
        }
    }
    s
}

/// Parses the text exposition back into `name{labels} -> value`.
pub fn parse_text(text: &str) -> std::collections::BTreeMap<String, f64> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let (k, v) = l.rsplit_once(' ')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}
