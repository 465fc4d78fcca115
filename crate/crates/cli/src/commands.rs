//! Subcommand implementations. Each returns the JSON document it reports.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::cube::{build, scan_latest, BuildOptions, PlacementPolicy};
use rankserve_core::experiments::{
    bench as run_bench, run_trace, shed_label, tune_stack, tuner_gain, BenchOptions, StackHarness, TunerOptions,
};
use rankserve_core::serving::{generation_dir, ServingStack};
use rankserve_core::shedding::{train_pruner, TrainConfig};
use rankserve_core::synth::{SynthModel, SynthSpec};
use rankserve_core::workload::{generate, read_trace, recurrence_fraction, replay as run_replay, write_trace, ReplayOptions, ReplayTarget, WorkloadSpec};
use rankserve_core::SparseParameter;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{ServiceConfig, LISTEN_ENV, MODEL_ROOT_ENV};
use crate::CliError;

/// Config file plus the two overridable fields.
#[derive(Debug, Clone, Default, Args)]
pub struct ServiceArgs {
    /// Service configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = LISTEN_ENV)]
    pub listen: Option<String>,
    #[arg(long, env = MODEL_ROOT_ENV)]
    pub model_root: Option<PathBuf>,
}

impl ServiceArgs {
    pub fn resolve(&self) -> Result<ServiceConfig, CliError> {
        let mut c = ServiceConfig::load_or_default(self.config.as_deref())?;
        c.override_with(self.listen.clone(), self.model_root.clone());
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct WorkloadArgs {
    /// Workload spec (JSON); flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub universe: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub recurrence: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl WorkloadArgs {
    pub fn resolve(&self) -> Result<WorkloadSpec, CliError> {
        let mut w = match &self.spec {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => WorkloadSpec::default(),
        };
        if let Some(v) = self.universe {
            w.key_universe = v;
        }
        if let Some(v) = self.rate {
            w.base_rate = v;
        }
        if let Some(v) = self.duration {
            w.duration_s = v;
        }
        if let Some(v) = self.candidates {
            w.candidates_per_request = v;
        }
        if let Some(v) = self.recurrence {
            w.recurrence_prob = v;
        }
        if let Some(v) = self.seed {
            w.seed = v;
        }
        w.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(w)
    }
}

fn write_json(path: Option<&Path>, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn latest_generation(root: &Path) -> Result<PathBuf, CliError> {
    scan_latest(root, 0)?
        .map(|t| t.dir)
        .ok_or_else(|| CliError::ModelLoad(format!("no complete generation under {}", root.display())))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct GenWorkloadArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Trace output (one JSON record per line).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_workload(args: &GenWorkloadArgs) -> Result<Value, CliError> {
    let spec = args.workload.resolve()?;
    let records = generate(&spec)?;
    write_trace(&args.out, &records)?;
    Ok(json!({
        "records": records.len(),
        "duration_s": spec.duration_s,
        "recurrence_fraction": recurrence_fraction(&records, spec.recurrence_window_s, spec.duration_s),
        "out": args.out,
    }))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum HeadSet {
    /// One head over every feature group.
    #[default]
    Single,
    /// Three heads sharing most feature groups.
    Shared,
}

#[derive(Debug, Clone, Args)]
pub struct BuildCubeArgs {
    /// Generate a synthetic model (cube plus dense heads) matching the workload.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: bool,
    /// Key-value pairs, one JSON object per line:
    /// {"key": ..., "embedding": [...], "show": ..., "click": ...}
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic models go to `<root>/<generation>`.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Cube directory for `--input`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub generation: u64,
    #[arg(long, default_value_t = 1)]
    pub shards: u32,
    #[arg(long)]
    pub block_size: Option<u64>,
    /// Keep only this many bytes of blocks in memory; the rest stays on disk.
    #[arg(long)]
    pub memory_budget: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    pub heads: HeadSet,
    /// Share of pairs each synthetic head scores at 0.5 or above.
    #[arg(long)]
    pub admit: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub model_seed: u64,
    #[command(flatten)]
    pub workload: WorkloadArgs,
}

#[derive(Deserialize)]
struct PairLine {
    key: String,
    embedding: Vec<f32>,
    #[serde(default)]
    show: f32,
    #[serde(default)]
    click: f32,
}

pub fn build_cube(args: &BuildCubeArgs) -> Result<Value, CliError> {
    let mut options = BuildOptions {
        generation: args.generation,
        shard_count: args.shards,
        placement: args.memory_budget.map_or(PlacementPolicy::AllMemory, PlacementPolicy::MemoryBudget),
        ..BuildOptions::default()
    };
    if let Some(b) = args.block_size {
        options.block_size_bytes = b;
    }
    if args.synthetic {
        let root = args.root.as_ref().ok_or_else(|| CliError::Config("--synthetic needs --root".into()))?;
        let workload = args.workload.resolve()?;
        let mut spec = SynthSpec {
            admit_fraction: args.admit,
            seed: args.model_seed,
            ..SynthSpec::for_workload(&workload)
        };
        if args.heads == HeadSet::Shared {
            spec = spec.with_shared_heads();
        }
        let model = SynthModel::generate(&spec, args.generation)?;
        let dir = generation_dir(root, args.generation);
        let manifest = model.write(&dir, &options)?;
        return Ok(json!({
            "dir": dir,
            "generation": manifest.generation,
            "keys": model.key_universe(),
            "heads": model.head_names(),
        }));
    }
    let (input, out) = match (&args.input, &args.out) {
        (Some(i), Some(o)) => (i, o),
        _ => return Err(CliError::Config("pass --synthetic --root DIR or --input FILE --out DIR".into())),
    };
    let file = std::fs::File::open(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", input.display(), n + 1)))?;
        pairs.push((p.key, SparseParameter::new(p.embedding, p.show, p.click)));
    }
    let count = pairs.len();
    let manifest = build(pairs, &options, out)?;
    Ok(json!({
        "dir": out,
        "generation": manifest.generation,
        "pairs": count,
        "blocks": manifest.blocks.len(),
    }))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub service: ServiceArgs,
    #[arg(long)]
    pub trace: PathBuf,
    /// Trace seconds per wall second; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    pub speed: f64,
    #[arg(long, default_value_t = 256)]
    pub in_flight: usize,
    /// Metrics output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn replay(args: &ReplayArgs) -> Result<Value, CliError> {
    let config = args.service.resolve()?;
    let stack_config = config.validate()?;
    let records = read_trace(&args.trace).map_err(|e| CliError::Config(format!("{}: {e}", args.trace.display())))?;
    let stack: Arc<dyn ReplayTarget> = Arc::new(ServingStack::open(stack_config, &latest_generation(&config.model_root)?)?);
    let metrics = run_replay(
        &records,
        &stack,
        ReplayOptions {
            speed: args.speed,
            max_in_flight: args.in_flight,
        },
    )?;
    Ok(serde_json::to_value(metrics)?)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Report output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trace for the pipeline throughput comparison; generated when omitted.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Skip the offline tuner run, by far the longest.
    #[arg(long)]
    pub skip_tuner: bool,
    /// Exit with status 2 when a criterion fails.
    #[arg(long)]
    pub strict: bool,
}

pub fn bench(args: &BenchArgs) -> Result<Value, CliError> {
    if let Some(t) = &args.trace {
        if !t.is_file() {
            return Err(CliError::Config(format!("trace {} does not exist", t.display())));
        }
    }
    let mut opts = BenchOptions {
        skip_tuner: args.skip_tuner,
        ..BenchOptions::default()
    };
    opts.throughput.trace = args.trace.clone();
    let report = run_bench(&opts, |c| eprintln!("{}", c.line()));
    for (id, e) in &report.errors {
        eprintln!("criterion {id}: ERROR {e}");
    }
    let value = serde_json::to_value(&report)?;
    if args.strict && !report.all_pass {
        write_json(args.out.as_deref(), &value)?;
        return Err(CliError::Runtime("one or more criteria failed".into()));
    }
    Ok(value)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub service: ServiceArgs,
    /// Trace to tune on. Without it a synthetic workload and model are used.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Overlay output, usable as `overlay_path` in the service config.
    #[arg(long)]
    pub out: PathBuf,
    /// Full report output; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub plan_points: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub requests: Option<usize>,
    #[arg(long)]
    pub latency_speed: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn tune(args: &TuneArgs) -> Result<Value, CliError> {
    let mut opts = TunerOptions::default();
    if let Some(v) = args.plan_points {
        opts.plan_points = v;
    }
    if let Some(v) = args.budget {
        opts.budget = v;
    }
    if let Some(v) = args.requests {
        opts.requests = v;
    }
    if let Some(v) = args.latency_speed {
        opts.latency_speed = v;
    }
    if let Some(v) = args.seed {
        opts.seed = v;
    }
    let report = match &args.trace {
        None => tuner_gain(&opts)?,
        Some(path) => {
            let config = args.service.resolve()?;
            let base = config.validate()?;
            let mut trace = read_trace(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            trace.truncate(opts.requests);
            let mut harness = StackHarness {
                base,
                model_dir: latest_generation(&config.model_root)?,
                trace,
                in_flight: opts.in_flight,
                latency_speed: opts.latency_speed,
                runs: 0,
            };
            tune_stack(&mut harness, &opts)?
        }
    };
    write_json(Some(&args.out), &report.overlay)?;
    let value = serde_json::to_value(&report)?;
    if args.report.is_some() {
        write_json(args.report.as_deref(), &value)?;
    }
    Ok(json!({
        "cpu_cost_default": report.cpu_cost_default,
        "cpu_cost_recommended": report.cpu_cost_recommended,
        "reduction": report.reduction,
        "max_latency_regression": report.max_latency_regression,
        "overlay": args.out,
    }))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct TrainShedderArgs {
    #[command(flatten)]
    pub service: ServiceArgs,
    /// Requests with recall-phase estimates to label.
    #[arg(long)]
    pub trace: PathBuf,
    /// Pruning model output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub slate: usize,
    /// Allowed recall loss of the final slate.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 6)]
    pub seed: u64,
}

/// Scores every candidate of the trace with the current model, labels each
/// request with the smallest safe keep count, and fits the pruning model.
pub fn train_shedder(args: &TrainShedderArgs) -> Result<Value, CliError> {
    if args.slate == 0 || !(0.0..=1.0).contains(&args.epsilon) {
        return Err(CliError::Config("slate must be positive and epsilon in [0, 1]".into()));
    }
    let config = args.service.resolve()?;
    let mut stack_config = config.validate()?;
    stack_config.query_cache.enabled = false;
    stack_config.shedding.enabled = false;
    let records = read_trace(&args.trace).map_err(|e| CliError::Config(format!("{}: {e}", args.trace.display())))?;
    if records.is_empty() {
        return Err(CliError::Config(format!("trace {} is empty", args.trace.display())));
    }
    let stack = ServingStack::open(stack_config, &latest_generation(&config.model_root)?)?;
    let out = run_trace(&stack, &records, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x1abe1);
    let mut logs = Vec::with_capacity(records.len());
    let mut prev = 0.0;
    for (r, o) in records.iter().zip(out) {
        let resp = o.map_err(CliError::Runtime)?;
        let scores: Vec<f32> = resp.items.iter().map(|i| i.score).collect();
        if scores.len() != r.request.candidates.len() {
            return Err(CliError::Runtime(format!("request {} was not fully scored", r.request.request_id)));
        }
        let rec = shed_label(&r.request, &scores, rng.random(), prev, args.slate, args.epsilon);
        prev = 1.0 - rec.keep_fraction();
        logs.push(rec);
    }
    let (model, report) = train_pruner(
        &logs,
        &TrainConfig {
            epsilon: args.epsilon,
            seed: args.seed,
            ..TrainConfig::default()
        },
    )?;
    model.save(&args.out)?;
    Ok(json!({"model": args.out, "training": report}))
}
