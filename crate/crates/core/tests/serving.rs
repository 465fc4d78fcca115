use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rankserve_core::cube::BuildOptions;
use rankserve_core::request::InferenceRequest;
use rankserve_core::serving::{generation_dir, parse_text, stages, ServingError, ServingStack, StackConfig};
use rankserve_core::shedding::{shed, train_pruner, PruningModel, ShedLogRecord, SheddingFeatures, TrainConfig};
use rankserve_core::synth::{SynthModel, SynthSpec};
use rankserve_core::workload::{generate, replay, ReplayOptions, ReplayTarget, WorkloadSpec};
use serde_json::json;

fn workload() -> WorkloadSpec {
    WorkloadSpec {
        key_universe: 2_000,
        candidates_per_request: 12,
        duration_s: 20.0,
        base_rate: 20.0,
        seed: 11,
        ..WorkloadSpec::default()
    }
}

fn model(spec: SynthSpec, generation: u64) -> SynthModel {
    SynthModel::generate(&spec, generation).unwrap()
}

fn write(m: &SynthModel, root: &Path) -> std::path::PathBuf {
    let dir = generation_dir(root, m.generation);
    m.write(&dir, &BuildOptions::default()).unwrap();
    dir
}

fn requests(n: usize) -> Vec<InferenceRequest> {
    generate(&workload()).unwrap().into_iter().take(n).map(|r| r.request).collect()
}

fn admit_all() -> StackConfig {
    let mut c = StackConfig::default();
    c.query_cache.admission_threshold = 0.0;
    c
}

#[test]
fn scores_match_reference_model() {
    let root = tempfile::tempdir().unwrap();
    let m = model(SynthSpec::for_workload(&workload()), 1);
    let dir = write(&m, root.path());
    let stack = ServingStack::open(StackConfig::default(), &dir).unwrap();
    for req in requests(30) {
        let want = m.score(&req, "main").unwrap();
        let resp = stack.score(req.clone(), Some(0.0)).unwrap();
        assert_eq!(resp.generation, 1);
        assert!(resp.shed.is_empty());
        let got: Vec<f32> = resp.items.iter().map(|i| i.score).collect();
        assert_eq!(got, want);
        let ids: Vec<u64> = resp.items.iter().map(|i| i.item).collect();
        let asked: Vec<u64> = req.candidates.iter().map(|c| c.item).collect();
        assert_eq!(ids, asked);
        assert!(resp.trace.iter().any(|t| t.stage == stages::DNN));
    }
}

#[test]
fn three_candidates_three_scores() {
    let root = tempfile::tempdir().unwrap();
    let dir = write(&model(SynthSpec::for_workload(&workload()), 1), root.path());
    let stack = ServingStack::open(StackConfig::default(), &dir).unwrap();
    let mut req = requests(1).remove(0);
    req.candidates.truncate(3);
    let resp = stack.score(req, None).unwrap();
    assert_eq!(resp.items.len(), 3);
    assert!(resp.shed.is_empty());
    assert!(resp.items.iter().all(|i| (0.0..=1.0).contains(&i.score)));
}

#[test]
fn repeat_hits_query_cache_until_feedback() {
    let root = tempfile::tempdir().unwrap();
    let dir = write(&model(SynthSpec::for_workload(&workload()), 1), root.path());
    let stack = ServingStack::open(admit_all(), &dir).unwrap();
    let req = requests(1).remove(0);
    let n = req.candidates.len();

    let first = stack.score(req.clone(), Some(1.0)).unwrap();
    assert_eq!(first.cache_hits(), 0);
    let scored = stack.metrics().scorer_items;
    assert_eq!(scored, n as u64);

    let second = stack.score(req.clone(), Some(2.0)).unwrap();
    assert_eq!(second.cache_hits(), n);
    assert_eq!(stack.metrics().scorer_items, scored, "cache hits must skip the forward pass");
    let a: Vec<f32> = first.items.iter().map(|i| i.score).collect();
    let b: Vec<f32> = second.items.iter().map(|i| i.score).collect();
    assert_eq!(a, b);

    assert_eq!(stack.feedback(req.user, "click", Some(3.0)), n);
    let third = stack.score(req.clone(), Some(4.0)).unwrap();
    assert_eq!(third.cache_hits(), 0);

    let late = stack.score(req, Some(4.0 + 121.0)).unwrap();
    assert_eq!(late.cache_hits(), 0, "entries expire after the window");
}

#[test]
fn reload_switches_generation_and_refuses_older() {
    let root = tempfile::tempdir().unwrap();
    let m1 = model(SynthSpec::for_workload(&workload()), 1);
    let d1 = write(&m1, root.path());
    let stack = ServingStack::open(admit_all(), &d1).unwrap();
    let req = requests(1).remove(0);
    stack.score(req.clone(), Some(0.0)).unwrap();

    let d2 = write(&m1.with_generation(2), root.path());
    assert_eq!(stack.reload(&d2).unwrap(), 2);
    let resp = stack.score(req.clone(), Some(1.0)).unwrap();
    assert_eq!(resp.generation, 2);
    assert_eq!(resp.cache_hits(), 0, "cached scores belong to the old generation");

    assert!(stack.reload(&d1).is_err());
    assert_eq!(stack.generation(), 2);
    let m = stack.metrics();
    assert_eq!((m.reloads, m.reload_failures), (1, 1));
}

#[test]
fn watcher_picks_up_new_generation() {
    let root = tempfile::tempdir().unwrap();
    let m1 = model(SynthSpec::for_workload(&workload()), 1);
    write(&m1, root.path());
    let stack = ServingStack::open_root(StackConfig::default(), root.path()).unwrap();
    stack.watch(root.path().to_path_buf(), Duration::from_millis(20));
    write(&m1.with_generation(5), root.path());
    let t = Instant::now();
    while stack.generation() != 5 && t.elapsed() < Duration::from_secs(10) {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(stack.generation(), 5);
    assert_eq!(stack.score(requests(1).remove(0), None).unwrap().generation, 5);
}

#[test]
fn incomplete_root_refuses_to_start() {
    let root = tempfile::tempdir().unwrap();
    let dir = write(&model(SynthSpec::for_workload(&workload()), 1), root.path());
    std::fs::remove_file(dir.join("DONE")).unwrap();
    assert!(matches!(
        ServingStack::open_root(StackConfig::default(), root.path()),
        Err(ServingError::ModelLoad(_))
    ));
}

fn with_heads(mut c: StackConfig, heads: &[&str]) -> StackConfig {
    let p = c.pipeline.processor_mut(stages::DNN).unwrap();
    p.settings = json!({"invocation_us": 60, "heads": heads});
    c
}

#[test]
fn several_heads_need_query_cache_off() {
    let root = tempfile::tempdir().unwrap();
    let spec = SynthSpec::for_workload(&workload()).with_shared_heads();
    let dir = write(&model(spec, 1), root.path());
    let err = ServingStack::open(with_heads(StackConfig::default(), &["ctr", "dwell"]), &dir);
    assert!(matches!(err, Err(ServingError::Config(_))));
    let err = ServingStack::open(with_heads(StackConfig::default(), &["nope"]), &dir);
    assert!(err.is_err());
}

#[test]
fn shared_heads_match_isolated_heads() {
    let root = tempfile::tempdir().unwrap();
    let spec = SynthSpec::for_workload(&workload()).with_shared_heads();
    let m = model(spec, 1);
    let dir = write(&m, root.path());
    let mut off = StackConfig::default();
    off.query_cache.enabled = false;
    let shared = ServingStack::open(with_heads(off.clone(), &["ctr", "dwell", "like"]), &dir).unwrap();
    let isolated: Vec<ServingStack> = ["ctr", "dwell", "like"]
        .iter()
        .map(|h| ServingStack::open(with_heads(off.clone(), &[h]), &dir).unwrap())
        .collect();
    for req in requests(20) {
        let s = shared.score(req.clone(), Some(0.0)).unwrap();
        for (stack, head) in isolated.iter().zip(["ctr", "dwell", "like"]) {
            let alone: Vec<f32> = stack.score(req.clone(), Some(0.0)).unwrap().items.iter().map(|i| i.score).collect();
            let together: Vec<f32> = s.items.iter().map(|i| i.heads[head]).collect();
            assert_eq!(alone, together, "head {head}");
            assert_eq!(alone, m.score(&req, head).unwrap());
        }
    }
    // The isolated ctr stack never fetches the other heads' own groups.
    let b = isolated[0].bundle();
    assert_eq!(b.groups.len(), 6);
    assert_eq!(shared.bundle().groups.len(), 8);
}

#[test]
fn forced_shedding_keeps_slate_and_flags_the_rest() {
    let root = tempfile::tempdir().unwrap();
    let dir = write(&model(SynthSpec::for_workload(&workload()), 1), root.path());
    let logs: Vec<ShedLogRecord> = (0..1200)
        .map(|i| {
            let f = SheddingFeatures::from_escores(0.0, 0.0, i % 7, &[0.5]);
            ShedLogRecord {
                features: f,
                n: 12,
                k_star: 3,
                quality_delta: 0.0,
            }
        })
        .collect();
    let (pruner, _) = train_pruner(&logs, &TrainConfig::default()).unwrap();
    let path = root.path().join("pruner.bin");
    pruner.save(&path).unwrap();
    assert!(PruningModel::load(&path).is_ok());

    let mut c = StackConfig::default();
    c.query_cache.enabled = false;
    c.shedding.enabled = true;
    c.shedding.model_path = Some(path);
    c.shedding.slate_size = 5;
    c.shedding.overload.force = true;
    // One arrival per window at capacity 1 leaves no headroom.
    c.shedding.overload.capacity_rps = 1.0;
    let stack = ServingStack::open(c, &dir).unwrap();
    for (t, req) in requests(10).into_iter().enumerate() {
        let escores: Vec<f32> = req.candidates.iter().map(|c| c.escore).collect();
        let prev = stack.shed_state().unwrap().tracker.previous();
        let f = SheddingFeatures::from_escores(0.0, prev, 0, &escores);
        let keep = shed(&pruner, &f, escores.len(), 5, true).keep;
        let n = req.candidates.len();
        let mut by_escore: Vec<_> = req.candidates.iter().map(|c| (c.escore, c.item)).collect();
        by_escore.sort_by(|a, b| b.0.total_cmp(&a.0));
        let resp = stack.score(req, Some(t as f64 * 10.0)).unwrap();
        assert_eq!(resp.items.len(), keep);
        assert!(keep >= 5);
        assert_eq!(resp.items.len() + resp.shed.len(), n);
        let dropped: Vec<u64> = resp.shed.iter().map(|s| s.item).collect();
        let tail: Vec<u64> = by_escore[keep..].iter().map(|p| p.1).collect();
        assert_eq!(dropped, tail, "the lowest estimated scores are shed");
    }
    let m = stack.metrics();
    assert!(m.shedding.enabled);
    assert_eq!(m.shedding.decisions, 10);
    assert!(m.shedding.mean_cutoff > 0.3);
    assert_eq!(m.shedding.shed_items, m.shedding.decisions * 12 - m.scorer_items);
}

#[test]
fn metrics_text_matches_snapshot_and_counters_grow() {
    let root = tempfile::tempdir().unwrap();
    let dir = write(&model(SynthSpec::for_workload(&workload()), 1), root.path());
    let stack = Arc::new(ServingStack::open(admit_all(), &dir).unwrap());
    let target: Arc<dyn ReplayTarget> = stack.clone();
    let trace = generate(&workload()).unwrap();
    let mut prev = parse_text(&stack.metrics_text());
    for chunk in trace.chunks(trace.len() / 3 + 1) {
        let r = replay(chunk, &target, ReplayOptions::default()).unwrap();
        assert_eq!(r.failed, 0);
        let now = parse_text(&stack.metrics_text());
        for (k, v) in &prev {
            if k.ends_with("_total") || k.contains("_total{") {
                assert!(now[k] >= *v, "{k} went down");
            }
        }
        prev = now;
    }
    let m = stack.metrics();
    let text = parse_text(&stack.metrics_text());
    assert_eq!(text["rankserve_requests_completed_total"], m.completed as f64);
    assert_eq!(text["rankserve_cube_cache_hit_ratio"], m.cube_cache.hit_ratio);
    assert_eq!(text["rankserve_query_cache_hit_ratio"], m.query_cache.hit_ratio);
    assert!(text.contains_key("rankserve_stage_latency_ms{stage=\"dnn\",quantile=\"0.95\"}"));
    assert!(text.contains_key("rankserve_stage_queue_depth{stage=\"cube\"}"));
    assert_eq!(m.completed as usize, trace.len());
    assert!(m.query_cache.hits > 0);
    assert!(m.cpu_cost > 0.0);
    assert_eq!(m.scored_pairs, m.scorer_items + m.query_cache.hits);
}
