use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::ops::{serving_registry, DnnSettings, OpContext, ServingCounters, ShedState};
use super::{metrics, ModelBundle, RankPayload, ServingError, StackConfig, StackMetrics};
use crate::cache::{CacheCounters, QueryCache, QueryCacheConfig};
use crate::cube::{scan_latest, CubeError, DoubleBuffer, ModelWatcher};
use crate::pipeline::{compile, Completed, Pipeline, StageSnapshot, Submission};
use crate::request::{FeedbackEvent, InferenceRequest, ScoreResponse};
use crate::shedding::{CutoffTracker, OverloadDetector, PruningModel};
use crate::workload::{ReplayCallback, ReplayResponse, ReplayTarget};

/// Loads bundles for reloads with the stack's cache settings and heads.
pub(crate) struct Loader {
    pub(crate) config: StackConfig,
    pub(crate) cube_counters: Arc<CacheCounters>,
    pub(crate) heads: Vec<String>,
    pub(crate) bundles: DoubleBuffer<ModelBundle>,
    pub(crate) reloads: AtomicU64,
    pub(crate) reload_failures: AtomicU64,
}

impl Loader {
    fn load(config: &StackConfig, counters: &Arc<CacheCounters>, heads: &[String], dir: &Path) -> Result<ModelBundle, ServingError> {
        ModelBundle::load(dir, &config.cube_cache, Arc::clone(counters), heads)
    }

    fn reload(&self, dir: &Path) -> Result<u64, ServingError> {
        let r = self.bundles.publish_with(|| {
            Self::load(&self.config, &self.cube_counters, &self.heads, dir)
                .map_err(|e| CubeError::VerificationFailed(e.to_string()))
        });
        match r {
            Ok(b) => {
                self.reloads.fetch_add(1, Ordering::Relaxed);
                log::info!("serving generation {} from {}", b.generation, dir.display());
                Ok(b.generation)
            }
            Err(e) => {
                self.reload_failures.fetch_add(1, Ordering::Relaxed);
                log::warn!("reload from {} refused: {e}", dir.display());
                Err(e.into())
            }
        }
    }
}

struct Watch {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

/// A running serving pipeline bound to a model root.
pub struct ServingStack {
    loader: Arc<Loader>,
    ctx: Arc<OpContext>,
    pipeline: Pipeline<RankPayload>,
    started: Instant,
    queue_wait_ewma: Arc<AtomicU64>,
    watch: Mutex<Option<Watch>>,
}

/// Heads named by `dnn` processors. A `dnn` processor without a list runs
/// the first head, which the empty list stands for when it is the only one.
fn active_heads(config: &StackConfig) -> Result<Vec<String>, ServingError> {
    let mut heads: Vec<String> = Vec::new();
    let mut default_head = false;
    for p in config.pipeline.processors.iter().filter(|p| p.kind == "dnn") {
        let s: DnnSettings = if p.settings.is_null() {
            DnnSettings::default()
        } else {
            serde_json::from_value(p.settings.clone()).map_err(|e| ServingError::Config(format!("{}: {e}", p.id)))?
        };
        if s.heads.is_empty() {
            default_head = true;
        }
        for h in s.heads {
            if !heads.contains(&h) {
                heads.push(h);
            }
        }
    }
    if default_head && !heads.is_empty() {
        return Err(ServingError::Config(
            "mixing dnn processors with and without explicit heads is not supported".into(),
        ));
    }
    if config.query_cache.enabled && heads.len() > 1 {
        return Err(ServingError::Config(
            "the query cache holds one score per item; disable it when running several heads".into(),
        ));
    }
    Ok(heads)
}

impl ServingStack {
    /// Starts a stack serving the generation directory `model_dir`.
    pub fn open(config: StackConfig, model_dir: &Path) -> Result<Self, ServingError> {
        config.validate()?;
        let heads = active_heads(&config)?;
        let cube_counters = Arc::new(CacheCounters::default());
        let bundle = Loader::load(&config, &cube_counters, &heads, model_dir)?;
        let query_cache = config.query_cache.enabled.then(|| {
            Arc::new(QueryCache::new(QueryCacheConfig {
                capacity: config.query_cache.capacity,
                expire_window_s: config.query_cache.expire_window_s,
                admission_threshold: config.query_cache.admission_threshold,
                ..QueryCacheConfig::default()
            }))
        });
        let shedding = if config.shedding.enabled {
            let model = match &config.shedding.model_path {
                Some(p) => Some(PruningModel::load(p).map_err(|e| ServingError::ModelLoad(format!("{}: {e}", p.display())))?),
                None => None,
            };
            Some(Arc::new(ShedState {
                model,
                detector: OverloadDetector::new(config.shedding.overload.clone()),
                tracker: CutoffTracker::default(),
                slate: config.shedding.slate_size,
            }))
        } else {
            None
        };
        let ctx = Arc::new(OpContext {
            counters: Arc::new(ServingCounters::default()),
            query_cache,
            shedding,
        });
        let graph = compile(&config.pipeline, &serving_registry(Arc::clone(&ctx)))?;
        let pipeline = Pipeline::start(Arc::new(graph));
        Ok(Self {
            loader: Arc::new(Loader {
                config,
                cube_counters,
                heads,
                bundles: DoubleBuffer::new(bundle),
                reloads: AtomicU64::new(0),
                reload_failures: AtomicU64::new(0),
            }),
            ctx,
            pipeline,
            started: Instant::now(),
            queue_wait_ewma: Arc::new(AtomicU64::new(0f64.to_bits())),
            watch: Mutex::new(None),
        })
    }

    /// Starts on the newest complete generation under `root`.
    pub fn open_root(config: StackConfig, root: &Path) -> Result<Self, ServingError> {
        let latest = scan_latest(root, 0)?
            .ok_or_else(|| ServingError::ModelLoad(format!("no complete generation under {}", root.display())))?;
        Self::open(config, &latest.dir)
    }

    pub fn config(&self) -> &StackConfig {
        &self.loader.config
    }

    pub fn generation(&self) -> u64 {
        self.loader.bundles.generation()
    }

    pub fn bundle(&self) -> Arc<ModelBundle> {
        self.loader.bundles.current()
    }

    /// Seconds since the stack started; the default request clock.
    pub fn clock(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Submits one request. `now` is the cache and overload clock in
    /// seconds; `None` uses [`clock`](Self::clock).
    pub fn submit<F>(&self, request: InferenceRequest, now: Option<f64>, done: F)
    where
        F: FnOnce(Result<ScoreResponse, ServingError>) + Send + 'static,
    {
        let now = now.unwrap_or_else(|| self.clock());
        let id = request.request_id;
        let tenant = request.tenant.clone();
        let payload = RankPayload::new(self.loader.bundles.current(), Arc::new(request), now);
        let mut sub = Submission::new(id, payload);
        if let Some(t) = tenant {
            sub = sub.with_tenant(t);
        }
        let feed = self.ctx.shedding.as_ref().map(|s| (Arc::clone(s), Arc::clone(&self.queue_wait_ewma)));
        self.pipeline.submit(sub, move |r| {
            let r = r.map_err(ServingError::Pipeline).map(to_response);
            if let (Ok(resp), Some((shed, ewma))) = (&r, feed) {
                if let Some(t) = resp.trace.iter().rev().find(|t| t.stage == super::stages::DNN) {
                    let w = t.queue_wait_us() as f64 / 1e3;
                    let prev = f64::from_bits(ewma.load(Ordering::Relaxed));
                    let next = 0.95 * prev + 0.05 * w;
                    ewma.store(next.to_bits(), Ordering::Relaxed);
                    shed.detector.observe_queue_wait(next);
                }
            }
            done(r)
        });
    }

    /// Submits and waits.
    pub fn score(&self, request: InferenceRequest, now: Option<f64>) -> Result<ScoreResponse, ServingError> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.submit(request, now, move |r| {
            let _ = tx.send(r);
        });
        rx.recv().unwrap_or(Err(ServingError::Pipeline(crate::pipeline::PipelineError::Closed)))
    }

    /// Invalidates the user's cached scores; returns how many were dropped.
    pub fn feedback(&self, user: u64, kind: &str, now: Option<f64>) -> usize {
        let now = now.unwrap_or_else(|| self.clock());
        self.ctx.query_cache.as_ref().map_or(0, |c| c.feedback(user, kind, now))
    }

    /// Loads `dir` and swaps it in if its generation is newer.
    pub fn reload(&self, dir: &Path) -> Result<u64, ServingError> {
        self.loader.reload(dir)
    }

    /// Polls `root` and hot-reloads each newer complete generation.
    pub fn watch(&self, root: PathBuf, poll: Duration) {
        let mut slot = self.watch.lock();
        if let Some(w) = slot.take() {
            w.stop.store(true, Ordering::Relaxed);
            let _ = w.handle.join();
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let loader = Arc::clone(&self.loader);
        let handle = std::thread::Builder::new()
            .name("reload".into())
            .spawn(move || {
                let watcher = ModelWatcher::spawn(root, poll, loader.bundles.generation());
                while !flag.load(Ordering::Relaxed) {
                    if let Ok(t) = watcher.triggers().recv_timeout(Duration::from_millis(20)) {
                        let _ = loader.reload(&t.dir);
                    }
                }
            })
            .expect("spawn reload thread");
        *slot = Some(Watch { stop, handle });
    }

    pub fn stage_stats(&self) -> Vec<StageSnapshot> {
        self.pipeline.stage_stats()
    }

    pub fn query_cache(&self) -> Option<&Arc<QueryCache>> {
        self.ctx.query_cache.as_ref()
    }

    pub fn counters(&self) -> &ServingCounters {
        &self.ctx.counters
    }

    pub fn cube_counters(&self) -> &CacheCounters {
        &self.loader.cube_counters
    }

    pub fn shed_state(&self) -> Option<&Arc<ShedState>> {
        self.ctx.shedding.as_ref()
    }

    pub fn in_flight(&self) -> usize {
        self.pipeline.in_flight()
    }

    pub fn metrics(&self) -> StackMetrics {
        metrics::collect(self)
    }

    pub fn metrics_text(&self) -> String {
        metrics::render(&self.metrics())
    }

    pub(crate) fn pipeline(&self) -> &Pipeline<RankPayload> {
        &self.pipeline
    }

    pub(crate) fn loader(&self) -> &Loader {
        &self.loader
    }

    /// Stops the watcher, drains the pipeline and fails whatever is left.
    pub fn shutdown(&mut self) {
        if let Some(w) = self.watch.lock().take() {
            w.stop.store(true, Ordering::Relaxed);
            let _ = w.handle.join();
        }
        self.pipeline.shutdown();
    }
}

impl Drop for ServingStack {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn to_response(c: Completed<RankPayload>) -> ScoreResponse {
    let generation = c.payload.generation();
    let mut scored = c.payload.scored;
    scored.sort_by_key(|(i, _)| *i);
    ScoreResponse {
        request_id: c.request_id,
        tenant: c.tenant,
        generation,
        items: scored.into_iter().map(|(_, s)| s).collect(),
        shed: c.payload.shed,
        trace: c.trace,
    }
}

impl ReplayTarget for ServingStack {
    fn feedback(&self, event: &FeedbackEvent) {
        ServingStack::feedback(self, event.user, &event.kind, Some(event.ts));
    }

    fn submit(&self, request: InferenceRequest, trace_time: f64, done: ReplayCallback) {
        ServingStack::submit(self, request, Some(trace_time), move |r| {
            done(r.map(|resp| ReplayResponse {
                scored: resp.items.len(),
                shed: resp.shed.len(),
                cache_hits: resp.cache_hits(),
            })
            .map_err(|e| e.to_string()))
        });
    }

    fn extra_metrics(&self) -> serde_json::Map<String, serde_json::Value> {
        match serde_json::to_value(self.metrics()) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => serde_json::Map::new(),
        }
    }
}
