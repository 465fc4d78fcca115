//! Measurement harnesses behind `bench` and the acceptance suite.
//!
//! Every experiment builds its own synthetic model under a scratch
//! directory, drives one or more [`ServingStack`]s with a generated trace and
//! returns a serialisable report with a `pass` flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::cache::{CacheCounters, CubeCacheConfig};
use crate::cube::BuildOptions;
use crate::pipeline::{compile, LegacyRunner, Pipeline, PipelineConfig, ProcessorConfig, Submission};
use crate::request::{InferenceRequest, ScoreResponse};
use crate::serving::{
    generation_dir, serving_registry, stages, ModelBundle, OpContext, RankPayload, ServingCounters, ServingError,
    ServingStack, StackConfig,
};
use crate::shedding::{
    recall_at, train_pruner, ShedLogRecord, SheddingError, SheddingFeatures, TrainConfig,
};
use crate::synth::{SynthError, SynthModel, SynthSpec};
use crate::tuning::{
    cma_es_constrained, collect_logs, fit_surrogates, tune, CmaOptions, Harness, LatencyScope, Measurement, ParamDescriptor,
    ParameterSpace, StageMeasurement, TuneOptions, TuneReport, TuningError, TuningPoint,
};
use crate::workload::{calibrate_zipf, generate, replay, ReplayOptions, ReplayTarget, TraceRecord, WorkloadError, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Serving(#[from] ServingError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Shedding(#[from] SheddingError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// One line of an acceptance report.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    /// The headline number compared against `target`.
    pub measured: f64,
    pub target: String,
    pub seconds: f64,
    pub details: serde_json::Value,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} {}: {} (measured {:.4}, target {}, {:.1}s)",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.measured,
            self.target,
            self.seconds
        )
    }
}

fn result<T: Serialize>(id: u32, name: &str, pass: bool, measured: f64, target: &str, started: Instant, details: &T) -> CriterionResult {
    CriterionResult {
        id,
        name: name.into(),
        pass,
        measured,
        target: target.into(),
        seconds: started.elapsed().as_secs_f64(),
        details: serde_json::to_value(details).unwrap_or(serde_json::Value::Null),
    }
}

/// Scratch directory removed on drop unless `keep` is set.
pub struct Scratch {
    pub path: PathBuf,
    keep: bool,
}

impl Scratch {
    pub fn new(tag: &str) -> std::io::Result<Self> {
        let base = std::env::temp_dir();
        for i in 0u32.. {
            let path = base.join(format!("rankserve-{tag}-{}-{i}", std::process::id()));
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, keep: false }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }

    pub fn keep(mut self) -> PathBuf {
        self.keep = true;
        self.path.clone()
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        if !self.keep {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }
}

/// Writes `model` as generation `model.generation` under `root`.
pub fn write_model(model: &SynthModel, root: &Path) -> Result<PathBuf, ExperimentError> {
    let dir = generation_dir(root, model.generation);
    model.write(&dir, &BuildOptions::default())?;
    Ok(dir)
}

/// Submits every record with its timestamp as the request clock, keeping at
/// most `cap` requests in flight. Feedback on a record is delivered before
/// its request. Outcomes come back in trace order.
pub fn run_trace(stack: &ServingStack, records: &[TraceRecord], cap: usize) -> Vec<Result<ScoreResponse, String>> {
    run_trace_paced(stack, records, cap, 0.0)
}

/// [`run_trace`] that also holds each submission until its trace offset,
/// divided by `speed`, has elapsed. `speed <= 0` submits as fast as the
/// in-flight cap allows.
pub fn run_trace_paced(
    stack: &ServingStack,
    records: &[TraceRecord],
    cap: usize,
    speed: f64,
) -> Vec<Result<ScoreResponse, String>> {
    let start = Instant::now();
    let t0 = records.first().map_or(0.0, |r| r.ts);
    let (slot_tx, slot_rx) = crossbeam_channel::bounded::<()>(cap.max(1));
    let (done_tx, done_rx) = crossbeam_channel::unbounded();
    for (i, rec) in records.iter().enumerate() {
        for fb in &rec.feedback {
            stack.feedback(fb.user, &fb.kind, Some(fb.ts));
        }
        if speed > 0.0 {
            let due = Duration::from_secs_f64(((rec.ts - t0) / speed).max(0.0));
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        slot_tx.send(()).expect("slot channel open");
        let slots = slot_rx.clone();
        let done = done_tx.clone();
        stack.submit(rec.request.clone(), Some(rec.ts), move |r| {
            let _ = slots.recv();
            let _ = done.send((i, r.map_err(|e| e.to_string())));
        });
    }
    drop(done_tx);
    let mut out: Vec<Option<Result<ScoreResponse, String>>> = (0..records.len()).map(|_| None).collect();
    for (i, r) in done_rx.iter().take(records.len()) {
        out[i] = Some(r);
    }
    out.into_iter().map(|r| r.unwrap_or(Err("no outcome".into()))).collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn no_query_cache() -> StackConfig {
    let mut c = StackConfig::default();
    c.query_cache.enabled = false;
    c
}

// ---------------------------------------------------------------------------
// 1. cube cache hit ratio

#[derive(Debug, Clone, Serialize)]
pub struct CubeHitOptions {
    pub key_universe: usize,
    /// Cube lookups to issue, approximately.
    pub accesses: usize,
    pub top_fraction: f64,
    pub mass_fraction: f64,
    pub disk_ratio: f64,
    pub mem_ratio: f64,
    pub seed: u64,
}

impl Default for CubeHitOptions {
    fn default() -> Self {
        Self {
            key_universe: 100_000,
            accesses: 1_000_000,
            top_fraction: 0.01,
            mass_fraction: 0.85,
            disk_ratio: 0.01,
            mem_ratio: 0.001,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CubeHitReport {
    pub zipf_exponent: f64,
    pub requests: usize,
    pub lookups: u64,
    pub memory_hits: u64,
    pub disk_hits: u64,
    pub backing_fetches: u64,
    pub hit_ratio: f64,
    /// Share of lookups that did not reach the backing cube.
    pub backing_reduction: f64,
    pub wall_seconds: f64,
}

pub fn cube_hit_ratio(opts: &CubeHitOptions) -> Result<CubeHitReport, ExperimentError> {
    let exponent = calibrate_zipf(opts.key_universe, opts.top_fraction, opts.mass_fraction)?;
    let base = WorkloadSpec::default();
    let per_request = base.user_groups.len() + base.candidates_per_request * base.item_groups.len();
    let requests = opts.accesses.div_ceil(per_request);
    let w = WorkloadSpec {
        key_universe: opts.key_universe,
        zipf_exponent: exponent,
        recurrence_prob: 0.0,
        base_rate: 50.0,
        duration_s: requests as f64 / 50.0,
        seed: opts.seed,
        ..base
    };
    let mut trace = generate(&w)?;
    trace.truncate(requests);
    let scratch = Scratch::new("cube")?;
    let model = SynthModel::generate(&SynthSpec::for_workload(&w), 1)?;
    let dir = write_model(&model, &scratch.path)?;
    let mut config = no_query_cache();
    config.cube_cache.disk_ratio = opts.disk_ratio;
    config.cube_cache.mem_ratio = opts.mem_ratio;
    let stack = Arc::new(ServingStack::open(config, &dir)?);
    let target: Arc<dyn ReplayTarget> = stack.clone();
    let r = replay(&trace, &target, ReplayOptions::default())?;
    if r.failed > 0 {
        return Err(ExperimentError::Other(format!("{} requests failed: {:?}", r.failed, r.first_error)));
    }
    let m = stack.metrics();
    let c = &m.cube_cache;
    Ok(CubeHitReport {
        zipf_exponent: exponent,
        requests: trace.len(),
        lookups: c.lookups,
        memory_hits: c.memory_hits,
        disk_hits: c.disk_hits,
        backing_fetches: c.backing_fetches,
        hit_ratio: c.hit_ratio,
        backing_reduction: 1.0 - c.backing_fetches as f64 / c.lookups.max(1) as f64,
        wall_seconds: r.wall_seconds,
    })
}

pub fn criterion_cube_hit(opts: &CubeHitOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = cube_hit_ratio(opts)?;
    let pass = (0.80..=0.90).contains(&r.hit_ratio);
    Ok(result(1, "cube cache hit ratio", pass, r.hit_ratio, "in [0.80, 0.90]", t, &r))
}

// ---------------------------------------------------------------------------
// 2. query cache compute savings

#[derive(Debug, Clone, Serialize)]
pub struct QuerySavingsOptions {
    pub workload: WorkloadSpec,
    pub window_s: f64,
    /// Share of pairs the synthetic model scores at or above the admission
    /// threshold.
    pub admit_fraction: f64,
    pub in_flight: usize,
}

impl Default for QuerySavingsOptions {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                key_universe: 20_000,
                recurrence_prob: 0.6,
                recurrence_window_s: 120.0,
                base_rate: 20.0,
                duration_s: 600.0,
                seed: 22,
                ..WorkloadSpec::default()
            },
            window_s: 120.0,
            admit_fraction: 0.55,
            in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuerySavingsReport {
    pub requests: usize,
    pub scorer_items_off: u64,
    pub scorer_items_on: u64,
    pub reduction: f64,
    pub query_hit_ratio: f64,
    pub admitted_share: f64,
}

pub fn query_cache_savings(opts: &QuerySavingsOptions) -> Result<QuerySavingsReport, ExperimentError> {
    let trace = generate(&opts.workload)?;
    let scratch = Scratch::new("query")?;
    let spec = SynthSpec {
        admit_fraction: Some(opts.admit_fraction),
        ..SynthSpec::for_workload(&opts.workload)
    };
    let model = SynthModel::generate(&spec, 1)?;
    let dir = write_model(&model, &scratch.path)?;

    let run = |config: StackConfig| -> Result<(u64, f64, usize), ExperimentError> {
        let stack = ServingStack::open(config, &dir)?;
        let out = run_trace(&stack, &trace, opts.in_flight);
        let mut admitted = 0usize;
        let mut total = 0usize;
        for r in &out {
            let r = r.as_ref().map_err(|e| ExperimentError::Other(e.clone()))?;
            total += r.items.len();
            admitted += r.items.iter().filter(|i| i.score >= 0.5).count();
        }
        let m = stack.metrics();
        Ok((m.scorer_items, m.query_cache.hit_ratio, admitted * 1_000_000 / total.max(1)))
    };
    let (off, _, admitted) = run(no_query_cache())?;
    let mut on = StackConfig::default();
    on.query_cache.expire_window_s = opts.window_s;
    let (with_cache, hit_ratio, _) = run(on)?;
    Ok(QuerySavingsReport {
        requests: trace.len(),
        scorer_items_off: off,
        scorer_items_on: with_cache,
        reduction: 1.0 - with_cache as f64 / off.max(1) as f64,
        query_hit_ratio: hit_ratio,
        admitted_share: admitted as f64 / 1e6,
    })
}

pub fn criterion_query_savings(opts: &QuerySavingsOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = query_cache_savings(opts)?;
    Ok(result(2, "query cache compute savings", r.reduction >= 0.18, r.reduction, ">= 0.18", t, &r))
}

// ---------------------------------------------------------------------------
// 3. staged pipeline vs synchronous baseline

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputOptions {
    pub requests: usize,
    /// Concurrent invocations per stage, and worker count of the baseline.
    pub parallelism: usize,
    pub batch_size: usize,
    /// Remote calls modelled as sleeps: base time, slow multiplier and slow
    /// share.
    pub remote_base_us: u64,
    pub slow_factor: u64,
    pub slow_fraction: f64,
    pub workload: WorkloadSpec,
    /// Replay this trace instead of generating one.
    pub trace: Option<PathBuf>,
}

impl Default for ThroughputOptions {
    fn default() -> Self {
        Self {
            requests: 2_000,
            parallelism: 4,
            batch_size: 8,
            remote_base_us: 1_000,
            slow_factor: 20,
            slow_fraction: 0.05,
            workload: WorkloadSpec {
                key_universe: 20_000,
                candidates_per_request: 10,
                recurrence_prob: 0.0,
                base_rate: 100.0,
                duration_s: 40.0,
                seed: 23,
                ..WorkloadSpec::default()
            },
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub requests: usize,
    pub sedp_seconds: f64,
    pub legacy_seconds: f64,
    pub sedp_rps: f64,
    pub legacy_rps: f64,
    pub throughput_ratio: f64,
    pub sedp_failed: usize,
    pub legacy_failed: usize,
    /// Requests whose score lists differ bit-wise between the two runs.
    pub mismatched: usize,
}

/// A linear ranking chain with two simulated remote calls. Operators carry
/// no synthetic CPU cost; the stages do their real work only.
pub fn linear_chain(opts: &ThroughputOptions) -> PipelineConfig {
    let (b, p) = (opts.batch_size, opts.parallelism);
    let delay = serde_json::json!({
        "base_us": opts.remote_base_us,
        "slow_factor": opts.slow_factor,
        "slow_fraction": opts.slow_fraction,
    });
    let proc_ = |id: &str, kind: &str| ProcessorConfig::new(id, kind).batch(b).parallel(p);
    PipelineConfig::new(
        vec![
            proc_("ingress", "identity"),
            proc_("user", "user_features"),
            proc_("item_extract", "item_features"),
            proc_("recall_rpc", "delay").with_settings(delay.clone()),
            proc_("item_process", "item_process"),
            proc_("cube", "cube"),
            proc_("feature_rpc", "delay").with_settings(delay),
            proc_("dnn", "dnn"),
        ],
        &[
            ("ingress", "user"),
            ("user", "item_extract"),
            ("item_extract", "recall_rpc"),
            ("recall_rpc", "item_process"),
            ("item_process", "cube"),
            ("cube", "feature_rpc"),
            ("feature_rpc", "dnn"),
        ],
    )
}

pub fn sedp_vs_legacy(opts: &ThroughputOptions) -> Result<ThroughputReport, ExperimentError> {
    let mut trace = match &opts.trace {
        Some(p) => crate::workload::read_trace(p)?,
        None => generate(&opts.workload)?,
    };
    trace.truncate(opts.requests);
    let scratch = Scratch::new("sedp")?;
    let model = SynthModel::generate(&SynthSpec::for_workload(&opts.workload), 1)?;
    let dir = write_model(&model, &scratch.path)?;
    let bundle = Arc::new(ModelBundle::load(
        &dir,
        &CubeCacheConfig::default(),
        Arc::new(CacheCounters::default()),
        &[],
    )?);
    let ctx = Arc::new(OpContext {
        counters: Arc::new(ServingCounters::default()),
        query_cache: None,
        shedding: None,
    });
    let graph = Arc::new(compile(&linear_chain(opts), &serving_registry(ctx))?);
    let submissions = || -> Vec<Submission<RankPayload>> {
        trace
            .iter()
            .map(|r| {
                Submission::new(
                    r.request.request_id,
                    RankPayload::new(Arc::clone(&bundle), Arc::new(r.request.clone()), r.ts),
                )
            })
            .collect()
    };
    let scores = |p: &RankPayload| -> Vec<u32> {
        let mut s = p.scored.clone();
        s.sort_by_key(|(i, _)| *i);
        s.iter().map(|(_, it)| it.score.to_bits()).collect()
    };

    let legacy = LegacyRunner::new(Arc::clone(&graph), opts.parallelism, opts.batch_size)?;
    let subs = submissions();
    let t = Instant::now();
    let legacy_out = legacy.run(subs);
    let legacy_seconds = t.elapsed().as_secs_f64();

    let mut pipeline = Pipeline::start(Arc::clone(&graph));
    let subs = submissions();
    let n = subs.len();
    let (tx, rx) = crossbeam_channel::unbounded();
    let t = Instant::now();
    for (i, s) in subs.into_iter().enumerate() {
        let tx = tx.clone();
        pipeline.submit(s, move |r| {
            let _ = tx.send((i, r));
        });
    }
    drop(tx);
    let mut sedp_out: Vec<Option<Vec<u32>>> = vec![None; n];
    let mut sedp_failed = 0;
    for (i, r) in rx.iter().take(n) {
        match r {
            Ok(c) => sedp_out[i] = Some(scores(&c.payload)),
            Err(_) => sedp_failed += 1,
        }
    }
    let sedp_seconds = t.elapsed().as_secs_f64();
    pipeline.shutdown();

    let mut legacy_failed = 0;
    let mut mismatched = 0;
    for (i, r) in legacy_out.iter().enumerate() {
        match r {
            Ok(c) => {
                if sedp_out[i].as_ref() != Some(&scores(&c.payload)) {
                    mismatched += 1;
                }
            }
            Err(_) => legacy_failed += 1,
        }
    }
    Ok(ThroughputReport {
        requests: n,
        sedp_seconds,
        legacy_seconds,
        sedp_rps: n as f64 / sedp_seconds,
        legacy_rps: n as f64 / legacy_seconds,
        throughput_ratio: legacy_seconds / sedp_seconds,
        sedp_failed,
        legacy_failed,
        mismatched,
    })
}

pub fn criterion_throughput(opts: &ThroughputOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = sedp_vs_legacy(opts)?;
    let pass = r.throughput_ratio >= 1.5 && r.mismatched == 0 && r.sedp_failed == 0 && r.legacy_failed == 0;
    Ok(result(3, "staged vs synchronous throughput", pass, r.throughput_ratio, ">= 1.5, identical scores", t, &r))
}

// ---------------------------------------------------------------------------
// 4. offline tuning

/// Replays a fixed trace against a fresh stack configured by each point.
///
/// Resource comes from a saturated run (requests issued as fast as the
/// in-flight cap allows): each stage's share of `cpu_cost`, CPU seconds per
/// 10^6 scored pairs, so the resource total is the stack's `cpu_cost` at
/// capacity. Latency comes from a second run paced at `latency_speed` times
/// trace time: operator CPU milliseconds per invocation, which at that load
/// is the service time a request spends in the stage. With
/// `latency_speed <= 0` both numbers come from the saturated run.
pub struct StackHarness {
    pub base: StackConfig,
    pub model_dir: PathBuf,
    pub trace: Vec<TraceRecord>,
    pub in_flight: usize,
    pub latency_speed: f64,
    pub runs: usize,
}

fn replay_metrics(
    config: StackConfig,
    dir: &Path,
    trace: &[TraceRecord],
    cap: usize,
    speed: f64,
) -> Result<crate::serving::StackMetrics, ExperimentError> {
    let stack = ServingStack::open(config, dir)?;
    let out = run_trace_paced(&stack, trace, cap, speed);
    if let Some(Err(e)) = out.iter().find(|r| r.is_err()) {
        return Err(ExperimentError::Other(e.clone()));
    }
    Ok(stack.metrics())
}

impl StackHarness {
    pub fn measure_config(&self, config: StackConfig) -> Result<Measurement, ExperimentError> {
        let saturated = replay_metrics(config.clone(), &self.model_dir, &self.trace, self.in_flight, 0.0)?;
        let paced = if self.latency_speed > 0.0 {
            Some(replay_metrics(config, &self.model_dir, &self.trace, self.in_flight, self.latency_speed)?)
        } else {
            None
        };
        let timing = paced.as_ref().unwrap_or(&saturated);
        let pairs = saturated.scored_pairs.max(1) as f64;
        let stages = saturated
            .stages
            .iter()
            .filter(|s| s.invocations > 0)
            .filter_map(|s| {
                let t = timing.stages.iter().find(|t| t.stage == s.stage && t.invocations > 0)?;
                Some(StageMeasurement {
                    stage: s.stage.clone(),
                    latency_ms: t.cpu_seconds / t.invocations as f64 * 1e3,
                    resource: s.cpu_seconds / pairs * 1e6,
                })
            })
            .collect();
        Ok(Measurement {
            stages,
            traffic: self.trace.len() as f64,
        })
    }
}

impl Harness for StackHarness {
    fn measure(&mut self, point: &TuningPoint) -> Result<Measurement, TuningError> {
        self.runs += 1;
        let mut config = self.base.clone();
        config
            .apply_point(point)
            .map_err(|e| TuningError::HarnessFailure(e.to_string()))?;
        self.measure_config(config)
            .map_err(|e| TuningError::HarnessFailure(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TunerOptions {
    pub workload: WorkloadSpec,
    pub requests: usize,
    /// Random points measured for the surrogate logs, besides the defaults.
    pub plan_points: usize,
    pub budget: usize,
    pub finalists: usize,
    pub validation_repetitions: usize,
    pub latency_slack: f64,
    pub in_flight: usize,
    /// Trace-time multiplier of the latency run; 40 offers about 200 req/s.
    pub latency_speed: f64,
    pub seed: u64,
}

impl Default for TunerOptions {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                key_universe: 50_000,
                zipf_exponent: 1.0,
                recurrence_prob: 0.6,
                base_rate: 5.0,
                duration_s: 600.0,
                seed: 24,
                ..WorkloadSpec::default()
            },
            requests: 1_200,
            plan_points: 120,
            budget: 3_000,
            finalists: 5,
            validation_repetitions: 3,
            latency_slack: 0.05,
            in_flight: 64,
            latency_speed: 40.0,
            seed: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TunerExperimentReport {
    pub log_points: usize,
    pub failed_points: usize,
    pub harness_runs: usize,
    pub cpu_cost_default: f64,
    pub cpu_cost_recommended: f64,
    pub reduction: f64,
    pub max_latency_regression: f64,
    pub overlay: serde_json::Value,
    pub report: TuneReport,
}

/// Uniform random points of `space`, with the defaults first.
pub fn sampling_plan(space: &ParameterSpace, points: usize, seed: u64) -> Vec<TuningPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = vec![space.defaults()];
    for _ in 0..points {
        let u: Vec<f64> = (0..space.dim()).map(|_| rng.random::<f64>()).collect();
        plan.push(space.decode_unit(&u));
    }
    plan
}

pub fn tuner_gain(opts: &TunerOptions) -> Result<TunerExperimentReport, ExperimentError> {
    let mut trace = generate(&opts.workload)?;
    trace.truncate(opts.requests);
    let scratch = Scratch::new("tune")?;
    let spec = SynthSpec {
        admit_fraction: Some(0.55),
        ..SynthSpec::for_workload(&opts.workload)
    };
    let model = SynthModel::generate(&spec, 1)?;
    let dir = write_model(&model, &scratch.path)?;
    let mut harness = StackHarness {
        base: StackConfig::default(),
        model_dir: dir,
        trace,
        in_flight: opts.in_flight,
        latency_speed: opts.latency_speed,
        runs: 0,
    };
    tune_stack(&mut harness, opts)
}

/// Collects logs over a sampling plan, fits surrogates and tunes `harness`.
/// Only the plan, search and validation fields of `opts` are read.
pub fn tune_stack(harness: &mut StackHarness, opts: &TunerOptions) -> Result<TunerExperimentReport, ExperimentError> {
    let space = ParameterSpace::reference();
    let plan = sampling_plan(&space, opts.plan_points, opts.seed);
    let logs = collect_logs(&space, harness, &plan, 1)?;
    let surrogates = fit_surrogates(&space, &logs.records)?;
    let report = tune(
        &space,
        &surrogates,
        harness,
        &TuneOptions {
            cma: CmaOptions {
                budget: opts.budget,
                seed: opts.seed,
                ..Default::default()
            },
            finalists: opts.finalists,
            latency_slack: opts.latency_slack,
            validation_repetitions: opts.validation_repetitions,
            latency_scope: LatencyScope::TunedStages,
        },
    )?;
    Ok(TunerExperimentReport {
        log_points: plan.len(),
        failed_points: logs.failed.len(),
        harness_runs: harness.runs,
        cpu_cost_default: report.default_measured.total_resource(),
        cpu_cost_recommended: report.recommended_measured.total_resource(),
        reduction: report.resource_reduction,
        max_latency_regression: report.max_latency_regression,
        overlay: StackConfig::overlay_for(&report.recommended),
        report,
    })
}

pub fn criterion_tuner(opts: &TunerOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = tuner_gain(opts)?;
    let pass = r.reduction >= 0.08 && r.max_latency_regression <= opts.latency_slack;
    Ok(result(4, "offline tuner cpu_cost gain", pass, r.reduction, ">= 0.08, latency slack 0.05", t, &r))
}

// ---------------------------------------------------------------------------
// 5. constrained CMA-ES

#[derive(Debug, Clone, Serialize)]
pub struct SphereReport {
    pub successes: usize,
    pub seeds: usize,
    pub distances: Vec<f64>,
    pub feasible: Vec<bool>,
}

/// Sphere in five dimensions under `x0 >= 1`, one run per seed. A run
/// succeeds when its best point is feasible and within 1e-2 of (1, 0, ..).
pub fn constrained_sphere(seeds: u64, budget: usize) -> Result<SphereReport, ExperimentError> {
    let dim = 5;
    let space = ParameterSpace::new(
        (0..dim)
            .map(|i| ParamDescriptor::continuous(&format!("x{i}"), -5.0, 5.0, 3.0))
            .collect(),
    )?;
    let coords = |p: &TuningPoint| -> Vec<f64> { (0..dim).map(|i| p.f64(&format!("x{i}")).unwrap()).collect() };
    let mut distances = Vec::new();
    let mut feasible = Vec::new();
    for seed in 0..seeds {
        let out = cma_es_constrained(
            &space,
            &space.defaults(),
            |p| coords(p).iter().map(|v| v * v).sum(),
            |p| vec![1.0 - coords(p)[0]],
            &CmaOptions {
                budget,
                seed,
                ..Default::default()
            },
        )?;
        let x = coords(&out.best);
        let d = ((x[0] - 1.0).powi(2) + x[1..].iter().map(|v| v * v).sum::<f64>()).sqrt();
        distances.push(d);
        feasible.push(x[0] >= 1.0);
    }
    let successes = distances.iter().zip(&feasible).filter(|(d, f)| **f && **d <= 1e-2).count();
    Ok(SphereReport {
        successes,
        seeds: seeds as usize,
        distances,
        feasible,
    })
}

pub fn criterion_cma() -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = constrained_sphere(10, 2000)?;
    Ok(result(5, "constrained CMA-ES sphere", r.successes >= 9, r.successes as f64, ">= 9 of 10 seeds", t, &r))
}

// ---------------------------------------------------------------------------
// 6. load shedding

#[derive(Debug, Clone, Serialize)]
pub struct SheddingOptions {
    pub workload: WorkloadSpec,
    pub train_requests: usize,
    pub eval_requests: usize,
    pub slate: usize,
    pub epsilon: f64,
    /// Standard deviation of the recall-phase estimate around the final
    /// score.
    pub estimate_noise: f64,
    /// Diurnal trace for the load-responsiveness check.
    pub diurnal: WorkloadSpec,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for SheddingOptions {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                key_universe: 20_000,
                candidates_per_request: 50,
                recurrence_prob: 0.0,
                base_rate: 20.0,
                duration_s: 300.0,
                seed: 26,
                ..WorkloadSpec::default()
            },
            train_requests: 3_000,
            eval_requests: 1_000,
            slate: 10,
            epsilon: 0.1,
            estimate_noise: 0.05,
            diurnal: WorkloadSpec {
                key_universe: 20_000,
                candidates_per_request: 50,
                recurrence_prob: 0.0,
                base_rate: 4.0,
                duration_s: 1_200.0,
                seed: 27,
                ..WorkloadSpec::default()
            },
            buckets: 48,
            seed: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SheddingReport {
    pub train_records: usize,
    pub holdout_rmse: f64,
    pub mean_label_keep: f64,
    pub eval_requests: usize,
    pub mean_degradation: f64,
    pub p95_degradation: f64,
    pub mean_keep_fraction: f64,
    pub degradation_bound: f64,
    pub diurnal_requests: usize,
    pub traffic_cutoff_pearson: f64,
    pub overloaded_share: f64,
}

/// Replaces each candidate's estimated score with a noisy copy of the
/// model's final score, as a recall stage correlated with ranking would.
pub fn with_recall_estimates(
    records: &mut [TraceRecord],
    model: &SynthModel,
    head: &str,
    noise: f64,
    seed: u64,
) -> Result<(), ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise.max(1e-12)).map_err(|e| ExperimentError::Other(e.to_string()))?;
    for r in records.iter_mut() {
        let scores = model.score(&r.request, head)?;
        for (c, s) in r.request.candidates.iter_mut().zip(scores) {
            let e = (f64::from(s) + n.sample(&mut rng)).clamp(0.0, 1.0);
            c.escore = ((e * 1e4).round() / 1e4) as f32;
        }
    }
    Ok(())
}

/// Candidate indices in descending estimated-score order, ties by index.
fn escore_order(req: &InferenceRequest) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..req.candidates.len()).collect();
    idx.sort_by(|&a, &b| req.candidates[b].escore.total_cmp(&req.candidates[a].escore));
    idx
}

fn top_by(scores: &[f32], among: &[usize], n: usize) -> Vec<usize> {
    let mut idx = among.to_vec();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Labels one request with the oracle keep count. Features use the given
/// quota and previous cutoff.
pub fn shed_label(
    req: &InferenceRequest,
    final_scores: &[f32],
    quota: f64,
    prev: f64,
    slate: usize,
    epsilon: f64,
) -> ShedLogRecord {
    let order = escore_order(req);
    let escores: Vec<f32> = order.iter().map(|&i| req.candidates[i].escore).collect();
    let sorted_final: Vec<f64> = order.iter().map(|&i| f64::from(final_scores[i])).collect();
    let qid = req.tenant.as_deref().map_or(0, |t| crate::cube::fnv1a64(t.as_bytes()));
    let f = SheddingFeatures::from_escores(quota, prev, qid, &escores);
    ShedLogRecord::label(f, &sorted_final, slate, epsilon)
}

pub fn shedding_quality(opts: &SheddingOptions) -> Result<SheddingReport, ExperimentError> {
    let scratch = Scratch::new("shed")?;
    let model = SynthModel::generate(&SynthSpec::for_workload(&opts.workload), 1)?;
    let dir = write_model(&model, &scratch.path)?;

    let mut all = generate(&opts.workload)?;
    all.truncate(opts.train_requests + opts.eval_requests);
    if all.len() < opts.train_requests + opts.eval_requests {
        return Err(ExperimentError::Other("shedding workload too short".into()));
    }
    with_recall_estimates(&mut all, &model, "main", opts.estimate_noise, opts.seed)?;
    let eval: Vec<TraceRecord> = all.split_off(opts.train_requests);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1abe1);
    let mut logs = Vec::with_capacity(all.len());
    let mut prev = 0.0;
    for r in &all {
        let scores = model.score(&r.request, "main")?;
        let rec = shed_label(&r.request, &scores, rng.random(), prev, opts.slate, opts.epsilon);
        prev = 1.0 - rec.keep_fraction();
        logs.push(rec);
    }
    let mean_label_keep = logs.iter().map(ShedLogRecord::keep_fraction).sum::<f64>() / logs.len() as f64;
    let (pruner, train) = train_pruner(
        &logs,
        &TrainConfig {
            epsilon: opts.epsilon,
            seed: opts.seed,
            ..TrainConfig::default()
        },
    )?;
    let pruner_path = scratch.path.join("pruner.bin");
    pruner.save(&pruner_path)?;

    // Quality under forced overload on held-out requests.
    let mut config = no_query_cache();
    config.shedding.enabled = true;
    config.shedding.model_path = Some(pruner_path.clone());
    config.shedding.slate_size = opts.slate;
    config.shedding.overload.force = true;
    let stack = ServingStack::open(config.clone(), &dir)?;
    let out = run_trace(&stack, &eval, 16);
    let mut degradations = Vec::with_capacity(eval.len());
    let mut keep_sum = 0.0;
    for (r, o) in eval.iter().zip(out) {
        let resp = o.map_err(ExperimentError::Other)?;
        let req = &r.request;
        let n = req.candidates.len();
        let full = model.score(req, "main")?;
        let order = escore_order(req);
        let mut kept: Vec<usize> = order[..resp.items.len()].to_vec();
        kept.sort_unstable();
        if kept.iter().zip(&resp.items).any(|(&i, it)| req.candidates[i].item != it.item) {
            return Err(ExperimentError::Other("kept items are not the estimated-score prefix".into()));
        }
        let all_idx: Vec<usize> = (0..n).collect();
        let reference = top_by(&full, &all_idx, opts.slate.min(n));
        let served: Vec<f32> = {
            let mut s = vec![f32::NEG_INFINITY; n];
            for (&i, it) in kept.iter().zip(&resp.items) {
                s[i] = it.score;
            }
            s
        };
        let pruned = top_by(&served, &kept, opts.slate.min(kept.len()));
        degradations.push(1.0 - recall_at(opts.slate.min(n), &reference, &pruned));
        keep_sum += resp.items.len() as f64 / n as f64;
    }
    drop(stack);
    let mean_degradation = degradations.iter().sum::<f64>() / degradations.len().max(1) as f64;
    let mut sorted = degradations.clone();
    sorted.sort_by(f64::total_cmp);
    let p95_degradation = sorted.get(((sorted.len() as f64 - 1.0) * 0.95).round() as usize).copied().unwrap_or(0.0);

    // Load responsiveness on a diurnal trace: shedding engages only when the
    // arrival rate passes the capacity threshold.
    let mut diurnal = generate(&opts.diurnal)?;
    with_recall_estimates(&mut diurnal, &model, "main", opts.estimate_noise, opts.seed ^ 7)?;
    let mut config = config;
    config.shedding.overload.force = false;
    config.shedding.overload.capacity_rps = opts.diurnal.base_rate;
    config.shedding.overload.window_s = 20.0;
    config.shedding.overload.queue_wait_ms = 1e12;
    let stack = ServingStack::open(config, &dir)?;
    let out = run_trace(&stack, &diurnal, 16);
    let mut traffic = vec![0.0; opts.buckets];
    let mut cut = vec![0.0; opts.buckets];
    let mut overloaded = 0usize;
    for (r, o) in diurnal.iter().zip(out) {
        let resp = o.map_err(ExperimentError::Other)?;
        let b = ((r.ts / opts.diurnal.duration_s * opts.buckets as f64) as usize).min(opts.buckets - 1);
        let n = r.request.candidates.len() as f64;
        let f = resp.shed.len() as f64 / n;
        traffic[b] += 1.0;
        cut[b] += f;
        overloaded += usize::from(f > 0.0);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = traffic
        .iter()
        .zip(&cut)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, c)| (*t, c / t))
        .unzip();
    Ok(SheddingReport {
        train_records: logs.len(),
        holdout_rmse: train.holdout_rmse,
        mean_label_keep,
        eval_requests: eval.len(),
        mean_degradation,
        p95_degradation,
        mean_keep_fraction: keep_sum / eval.len().max(1) as f64,
        degradation_bound: opts.epsilon + 0.02,
        diurnal_requests: diurnal.len(),
        traffic_cutoff_pearson: pearson(&xs, &ys),
        overloaded_share: overloaded as f64 / diurnal.len().max(1) as f64,
    })
}

pub fn criterion_shedding(opts: &SheddingOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = shedding_quality(opts)?;
    let pass = r.mean_degradation <= r.degradation_bound && r.traffic_cutoff_pearson > 0.0;
    Ok(result(
        6,
        "load shedding quality and responsiveness",
        pass,
        r.mean_degradation,
        &format!("<= {:.2} and pearson > 0", r.degradation_bound),
        t,
        &r,
    ))
}

// ---------------------------------------------------------------------------
// 7. hot reload under load

#[derive(Debug, Clone, Serialize)]
pub struct ReloadOptions {
    pub workload: WorkloadSpec,
    pub reloads: u64,
    pub poll_ms: u64,
}

impl Default for ReloadOptions {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                key_universe: 20_000,
                candidates_per_request: 10,
                recurrence_prob: 0.3,
                recurrence_window_s: 2.0,
                base_rate: 500.0,
                duration_s: 22.0,
                diurnal_profile: vec![1.0],
                seed: 28,
                ..WorkloadSpec::default()
            },
            reloads: 10,
            poll_ms: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReloadReport {
    pub requests: usize,
    pub offered_rps: f64,
    pub achieved_rps: f64,
    pub failed: usize,
    pub reloads: u64,
    pub reload_failures: u64,
    pub mixed_generation_batches: u64,
    pub final_generation: u64,
    pub generations_served: Vec<u64>,
}

pub fn hot_reload(opts: &ReloadOptions) -> Result<ReloadReport, ExperimentError> {
    let trace = generate(&opts.workload)?;
    let scratch = Scratch::new("reload")?;
    let root = scratch.path.join("models");
    let staging = scratch.path.join("staging");
    std::fs::create_dir_all(&root)?;
    std::fs::create_dir_all(&staging)?;
    let model = SynthModel::generate(&SynthSpec::for_workload(&opts.workload), 1)?;
    write_model(&model, &root)?;
    let staged: Vec<PathBuf> = (2..=opts.reloads + 1)
        .map(|g| write_model(&model.with_generation(g), &staging))
        .collect::<Result<_, _>>()?;

    let stack = Arc::new(ServingStack::open_root(StackConfig::default(), &root)?);
    stack.watch(root.clone(), Duration::from_millis(opts.poll_ms));
    let span = opts.workload.duration_s * 0.8;
    let gap = Duration::from_secs_f64(span / opts.reloads.max(1) as f64);
    let publisher = {
        let root = root.clone();
        std::thread::spawn(move || -> std::io::Result<()> {
            for dir in staged {
                std::thread::sleep(gap);
                std::fs::rename(&dir, root.join(dir.file_name().unwrap()))?;
            }
            Ok(())
        })
    };
    let target: Arc<dyn ReplayTarget> = stack.clone();
    let r = replay(
        &trace,
        &target,
        ReplayOptions {
            speed: 1.0,
            max_in_flight: 1024,
        },
    )?;
    publisher
        .join()
        .map_err(|_| ExperimentError::Other("publisher panicked".into()))??;
    let want = opts.reloads + 1;
    let t = Instant::now();
    while stack.generation() < want && t.elapsed() < Duration::from_secs(30) {
        std::thread::sleep(Duration::from_millis(20));
    }
    let m = stack.metrics();
    let mut generations: Vec<u64> = Vec::new();
    // The replay does not keep responses; probe the final generation once.
    if let Some(rec) = trace.first() {
        generations.push(stack.score(rec.request.clone(), None)?.generation);
    }
    Ok(ReloadReport {
        requests: r.requests,
        offered_rps: trace.len() as f64 / opts.workload.duration_s,
        achieved_rps: r.throughput_rps,
        failed: r.failed,
        reloads: m.reloads,
        reload_failures: m.reload_failures,
        mixed_generation_batches: m.mixed_generation_batches,
        final_generation: m.generation,
        generations_served: generations,
    })
}

pub fn criterion_reload(opts: &ReloadOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = hot_reload(opts)?;
    let pass = r.failed == 0
        && r.mixed_generation_batches == 0
        && r.reloads >= opts.reloads
        && r.offered_rps >= 0.95 * opts.workload.base_rate
        && r.achieved_rps >= 0.95 * opts.workload.base_rate;
    Ok(result(
        7,
        "hot reload under load",
        pass,
        r.failed as f64,
        "0 failed, 0 mixed batches, all reloads applied",
        t,
        &r,
    ))
}

// ---------------------------------------------------------------------------
// 8. multi-tenant consolidation

#[derive(Debug, Clone, Serialize)]
pub struct ConsolidationOptions {
    pub workload: WorkloadSpec,
    pub requests: usize,
    pub in_flight: usize,
}

impl Default for ConsolidationOptions {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                key_universe: 20_000,
                recurrence_prob: 0.0,
                base_rate: 20.0,
                duration_s: 150.0,
                seed: 29,
                ..WorkloadSpec::default()
            },
            requests: 2_000,
            in_flight: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsolidationReport {
    pub heads: Vec<String>,
    pub shared_group_fraction: f64,
    pub requests: usize,
    pub isolated_cpu_seconds: f64,
    pub isolated_pairs: u64,
    pub isolated_cpu_cost: f64,
    pub shared_cpu_seconds: f64,
    pub shared_pairs: u64,
    pub shared_cpu_cost: f64,
    pub reduction: f64,
    pub score_mismatches: usize,
    pub failed: usize,
}

fn with_heads(mut c: StackConfig, heads: &[String]) -> StackConfig {
    if let Some(p) = c.pipeline.processor_mut(stages::DNN) {
        let mut s = p.settings.clone();
        if !s.is_object() {
            s = serde_json::json!({});
        }
        s["heads"] = serde_json::json!(heads);
        p.settings = s;
    }
    c
}

pub fn consolidation(opts: &ConsolidationOptions) -> Result<ConsolidationReport, ExperimentError> {
    let mut trace = generate(&opts.workload)?;
    trace.truncate(opts.requests);
    let scratch = Scratch::new("tenants")?;
    let spec = SynthSpec::for_workload(&opts.workload).with_shared_heads();
    let min_shared = spec
        .heads
        .iter()
        .flat_map(|a| spec.heads.iter().map(move |b| crate::synth::shared_group_fraction(a, b)))
        .fold(1.0, f64::min);
    let model = SynthModel::generate(&spec, 1)?;
    let dir = write_model(&model, &scratch.path)?;
    let heads = model.head_names();

    let mut failed = 0;
    let mut isolated_scores: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    let (mut iso_cpu, mut iso_pairs) = (0.0, 0u64);
    for h in &heads {
        let stack = ServingStack::open(with_heads(no_query_cache(), std::slice::from_ref(h)), &dir)?;
        let out = run_trace(&stack, &trace, opts.in_flight);
        let m = stack.metrics();
        iso_cpu += m.cpu_seconds;
        iso_pairs += m.scored_pairs;
        let scores = out
            .into_iter()
            .map(|r| match r {
                Ok(resp) => resp.items.iter().map(|i| i.score.to_bits()).collect(),
                Err(_) => {
                    failed += 1;
                    Vec::new()
                }
            })
            .collect();
        isolated_scores.insert(h.clone(), scores);
    }

    let stack = ServingStack::open(with_heads(no_query_cache(), &heads), &dir)?;
    let out = run_trace(&stack, &trace, opts.in_flight);
    let m = stack.metrics();
    let mut mismatches = 0;
    for (i, r) in out.into_iter().enumerate() {
        let resp = match r {
            Ok(r) => r,
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        for h in &heads {
            let together: Vec<u32> = resp.items.iter().map(|it| it.heads.get(h).map_or(u32::MAX, |s| s.to_bits())).collect();
            if together != isolated_scores[h][i] {
                mismatches += 1;
            }
        }
    }
    let isolated_cpu_cost = iso_cpu / iso_pairs.max(1) as f64 * 1e6;
    let shared_cpu_cost = m.cpu_cost;
    Ok(ConsolidationReport {
        heads,
        shared_group_fraction: min_shared,
        requests: trace.len(),
        isolated_cpu_seconds: iso_cpu,
        isolated_pairs: iso_pairs,
        isolated_cpu_cost,
        shared_cpu_seconds: m.cpu_seconds,
        shared_pairs: m.scored_pairs,
        shared_cpu_cost,
        reduction: 1.0 - shared_cpu_cost / isolated_cpu_cost,
        score_mismatches: mismatches,
        failed,
    })
}

pub fn criterion_consolidation(opts: &ConsolidationOptions) -> Result<CriterionResult, ExperimentError> {
    let t = Instant::now();
    let r = consolidation(opts)?;
    let pass = r.reduction >= 0.40 && r.score_mismatches == 0 && r.failed == 0 && r.shared_group_fraction >= 0.8;
    Ok(result(8, "multi-head consolidation", pass, r.reduction, ">= 0.40, identical scores", t, &r))
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchOptions {
    pub cube: CubeHitOptions,
    pub query: QuerySavingsOptions,
    pub throughput: ThroughputOptions,
    pub tuner: TunerOptions,
    pub shedding: SheddingOptions,
    pub reload: ReloadOptions,
    pub consolidation: ConsolidationOptions,
    /// Skip the tuner run, which dominates the bench time.
    pub skip_tuner: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub throughput_ratio: f64,
    pub cube_hit_ratio: f64,
    pub query_cache_reduction: f64,
    pub criteria: Vec<CriterionResult>,
    pub errors: BTreeMap<u32, String>,
    pub all_pass: bool,
}

/// Runs every measurement criterion and collects the results. A criterion
/// that errors counts as failed and its error is recorded.
pub fn bench(opts: &BenchOptions, mut progress: impl FnMut(&CriterionResult)) -> BenchReport {
    let mut criteria = Vec::new();
    let mut errors = BTreeMap::new();
    let mut push = |id: u32, r: Result<CriterionResult, ExperimentError>| match r {
        Ok(c) => {
            progress(&c);
            criteria.push(c);
        }
        Err(e) => {
            errors.insert(id, e.to_string());
        }
    };
    push(1, criterion_cube_hit(&opts.cube));
    push(2, criterion_query_savings(&opts.query));
    push(3, criterion_throughput(&opts.throughput));
    if !opts.skip_tuner {
        push(4, criterion_tuner(&opts.tuner));
    }
    push(5, criterion_cma());
    push(6, criterion_shedding(&opts.shedding));
    push(7, criterion_reload(&opts.reload));
    push(8, criterion_consolidation(&opts.consolidation));
    let get = |id: u32| criteria.iter().find(|c| c.id == id);
    let field = |id: u32, key: &str| get(id).and_then(|c| c.details.get(key)).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
    BenchReport {
        throughput_ratio: field(3, "throughput_ratio"),
        cube_hit_ratio: field(1, "hit_ratio"),
        query_cache_reduction: field(2, "reduction"),
        all_pass: errors.is_empty() && criteria.iter().all(|c| c.pass),
        criteria,
        errors,
    }
}
