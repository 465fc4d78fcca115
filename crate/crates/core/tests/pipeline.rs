use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::pipeline::*;

fn registry() -> OperatorRegistry<Vec<u32>> {
    OperatorRegistry::new()
}

fn p(id: &str, kind: &str) -> ProcessorConfig {
    ProcessorConfig::new(id, kind)
}

#[test]
fn linear_chain_topo_order() {
    let cfg = PipelineConfig::new(
        vec![p("C", "identity"), p("A", "identity"), p("B", "identity")],
        &[("A", "B"), ("B", "C")],
    );
    let g = compile(&cfg, &registry()).unwrap();
    assert_eq!(g.topo_order(), vec!["A", "B", "C"]);
    assert_eq!(g.sources(), vec!["A"]);
    assert_eq!(g.sinks(), vec!["C"]);
}

fn diamond() -> PipelineConfig {
    PipelineConfig::new(
        vec![p("A", "identity"), p("B", "identity"), p("C", "identity"), p("D", "join")],
        &[("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")],
    )
}

#[test]
fn diamond_shares_one_channel() {
    let g = compile(&diamond(), &registry()).unwrap();
    let mut inputs = g.channel_inputs("D");
    inputs.sort();
    assert_eq!(inputs, vec!["B", "C"]);
    assert_eq!(g.channel_count(), 4);
}

#[test]
fn compile_errors() {
    let mut cyclic = diamond();
    cyclic.edges.push(EdgeConfig {
        from: "D".into(),
        to: "A".into(),
    });
    assert!(matches!(compile(&cyclic, &registry()), Err(PipelineError::CycleDetected(_))));

    let unknown = PipelineConfig::new(vec![p("A", "nope")], &[]);
    assert!(matches!(
        compile(&unknown, &registry()),
        Err(PipelineError::UnknownOperator { .. })
    ));

    let dangling = PipelineConfig::new(vec![p("A", "identity")], &[("A", "Z")]);
    assert!(matches!(compile(&dangling, &registry()), Err(PipelineError::DanglingEdge { .. })));

    let dup = PipelineConfig::new(vec![p("A", "identity"), p("A", "identity")], &[]);
    assert!(matches!(compile(&dup, &registry()), Err(PipelineError::DuplicateId(_))));

    let small = PipelineConfig::new(vec![p("A", "identity").batch(8).capacity(4)], &[]);
    assert!(matches!(compile(&small, &registry()), Err(PipelineError::InvalidConfig(_))));
}

#[test]
fn config_json_round_trip_and_version_check() {
    let cfg = diamond();
    let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let bad = cfg.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
    assert!(PipelineConfig::from_json(&bad).is_err());
}

#[test]
fn identity_chain_preserves_payload_and_traces_each_stage() {
    let cfg = PipelineConfig::new(
        vec![p("A", "identity"), p("B", "identity"), p("C", "identity")],
        &[("A", "B"), ("B", "C")],
    );
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &registry()).unwrap()));
    let out = pipe.execute(Submission::new(42, vec![1, 2, 3])).unwrap();
    assert_eq!(out.payload, vec![1, 2, 3]);
    let stages: Vec<&str> = out.trace.iter().map(|t| t.stage.as_str()).collect();
    assert_eq!(stages, vec!["A", "B", "C"]);
    for t in &out.trace {
        assert!(t.enqueued_us <= t.started_us && t.started_us <= t.finished_us);
    }
}

struct Tag(u32);

impl Operator<Vec<u32>> for Tag {
    fn process(&self, batch: Vec<Event<Vec<u32>>>, out: &mut Emitter<Vec<u32>>) -> Result<(), OperatorError> {
        for mut ev in batch {
            ev.payload = vec![self.0];
            out.emit(ev);
        }
        Ok(())
    }
}

struct Count(Arc<AtomicU64>);

impl Operator<Vec<u32>> for Count {
    fn process(&self, batch: Vec<Event<Vec<u32>>>, out: &mut Emitter<Vec<u32>>) -> Result<(), OperatorError> {
        self.0.fetch_add(batch.len() as u64, Ordering::SeqCst);
        batch.into_iter().for_each(|e| out.emit(e));
        Ok(())
    }
}

#[test]
fn join_recombines_fragments_into_one_event() {
    let seen = Arc::new(AtomicU64::new(0));
    let mut reg = registry();
    reg.register("user", |_| Ok(Arc::new(Tag(1)) as Arc<dyn Operator<Vec<u32>>>));
    reg.register("item", |_| Ok(Arc::new(Tag(2)) as Arc<dyn Operator<Vec<u32>>>));
    let s = Arc::clone(&seen);
    reg.register("count", move |_| Ok(Arc::new(Count(Arc::clone(&s))) as Arc<dyn Operator<Vec<u32>>>));
    let cfg = PipelineConfig::new(
        vec![
            p("split", "identity"),
            p("user", "user"),
            p("item", "item"),
            p("join", "join"),
            p("after", "count"),
        ],
        &[("split", "user"), ("split", "item"), ("user", "join"), ("item", "join"), ("join", "after")],
    );
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &reg).unwrap()));
    for id in 0..50 {
        let out = pipe.execute(Submission::new(id, vec![])).unwrap();
        assert_eq!(out.payload, vec![1, 2]);
    }
    assert_eq!(seen.load(Ordering::SeqCst), 50);
}

#[test]
fn past_deadline_fails_without_running_operators() {
    let seen = Arc::new(AtomicU64::new(0));
    let mut reg = registry();
    let s = Arc::clone(&seen);
    reg.register("count", move |_| Ok(Arc::new(Count(Arc::clone(&s))) as Arc<dyn Operator<Vec<u32>>>));
    let cfg = PipelineConfig::new(vec![p("A", "count")], &[]);
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &reg).unwrap()));
    let sub = Submission::new(5, vec![]).with_deadline(Instant::now() - Duration::from_millis(1));
    assert_eq!(
        pipe.execute(sub).unwrap_err(),
        PipelineError::DeadlineExceeded {
            request_id: 5,
            stage: None
        }
    );
    assert_eq!(seen.load(Ordering::SeqCst), 0);
}

#[test]
fn operator_failure_names_request_and_stage() {
    let cfg = PipelineConfig::new(
        vec![p("A", "identity"), p("F", "fault").with_settings(serde_json::json!({"every": 2}))],
        &[("A", "F")],
    );
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &registry()).unwrap()));
    match pipe.execute(Submission::new(4, vec![])) {
        Err(PipelineError::StageFailure { request_id, stage, .. }) => {
            assert_eq!((request_id, stage.as_str()), (4, "F"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(pipe.execute(Submission::new(3, vec![])).is_ok());
}

/// Independent re-derivation of the tenant hash: FNV-1a over LE bytes, then
/// the splitmix64 finaliser, top 53 bits as a unit-interval point.
fn oracle_point(id: u64) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    (h >> 11) as f64 / 9007199254740992.0
}

#[test]
fn tenant_split_matches_offline_hash_count() {
    let weights: BTreeMap<String, f64> = [("A".to_string(), 0.9), ("B".to_string(), 0.1)].into();
    let routed_b = (0..10_000u64).filter(|&id| choose_tenant(id, &weights).unwrap() == "B").count();
    let oracle_b = (0..10_000u64).filter(|&id| oracle_point(id) >= 0.9).count();
    assert_eq!(routed_b, oracle_b);
    assert!((900..=1100).contains(&routed_b), "B got {routed_b}");
}

fn tenant_config(split: &[(&str, f64)]) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(
        vec![p("dispatch", "dispatch"), p("a", "identity"), p("b", "identity")],
        &[("dispatch", "a"), ("dispatch", "b")],
    );
    cfg.tenants = Some(TenantConfig {
        split: split.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        entries: [("A".to_string(), "a".to_string()), ("B".to_string(), "b".to_string())].into(),
    });
    cfg
}

#[test]
fn dispatch_routes_to_tenant_branch_and_tables_swap() {
    let pipe = Pipeline::start(Arc::new(
        compile(&tenant_config(&[("A", 1.0), ("B", 0.0)]), &registry()).unwrap(),
    ));
    for id in 0..20 {
        let out = pipe.execute(Submission::new(id, vec![])).unwrap();
        assert_eq!(out.tenant.as_deref(), Some("A"));
        assert_eq!(out.trace.last().unwrap().stage, "a");
    }
    let forced = pipe.execute(Submission::new(1, vec![]).with_tenant("B")).unwrap();
    assert_eq!(forced.trace.last().unwrap().stage, "b");

    let split = TenantSplit::new(
        [("B".to_string(), 1.0)].into(),
        [("A".to_string(), "a".to_string()), ("B".to_string(), "b".to_string())].into(),
    );
    pipe.graph().swap_tenants(split).unwrap();
    let out = pipe.execute(Submission::new(7, vec![])).unwrap();
    assert_eq!(out.tenant.as_deref(), Some("B"));

    pipe.graph()
        .swap_tenants(TenantSplit::new(BTreeMap::new(), BTreeMap::new()))
        .unwrap();
    assert_eq!(pipe.execute(Submission::new(8, vec![])).unwrap_err(), PipelineError::NoTenants);
}

#[test]
fn conservation_over_randomized_requests() {
    let cfg = PipelineConfig::new(
        vec![
            p("split", "identity").batch(8).parallel(2),
            p("left", "fault").batch(4).with_settings(serde_json::json!({"every": 97})),
            p("right", "identity").batch(16),
            p("join", "join").batch(8),
            p("tail", "fault").batch(8).parallel(2).with_settings(serde_json::json!({"every": 89})),
        ],
        &[("split", "left"), ("split", "right"), ("left", "join"), ("right", "join"), ("join", "tail")],
    );
    let mut cfg = cfg;
    cfg.processor_mut("join").unwrap().join_timeout_ms = Some(50);
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &registry()).unwrap()));
    let n = 100_000u64;
    let ok = Arc::new(AtomicU64::new(0));
    let err = Arc::new(AtomicU64::new(0));
    let calls = Arc::new(parking_lot::Mutex::new(vec![0u8; n as usize]));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in 0..n {
        let mut sub = Submission::new(id, vec![id as u32]);
        match rng.random_range(0..100) {
            0 => sub = sub.with_deadline(Instant::now()),
            1 => sub = sub.with_timeout(Duration::from_micros(rng.random_range(1..500))),
            _ => {}
        }
        let (ok, err, calls) = (Arc::clone(&ok), Arc::clone(&err), Arc::clone(&calls));
        pipe.submit(sub, move |r| {
            calls.lock()[id as usize] += 1;
            match r {
                Ok(c) => {
                    assert_eq!(c.payload, vec![id as u32, id as u32]);
                    ok.fetch_add(1, Ordering::SeqCst)
                }
                Err(_) => err.fetch_add(1, Ordering::SeqCst),
            };
        });
    }
    let started = Instant::now();
    while ok.load(Ordering::SeqCst) + err.load(Ordering::SeqCst) < n && started.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(ok.load(Ordering::SeqCst) + err.load(Ordering::SeqCst), n);
    assert!(calls.lock().iter().all(|&c| c == 1));
    assert!(err.load(Ordering::SeqCst) > 0);
    assert_eq!(pipe.in_flight(), 0);
}

#[test]
fn channels_stay_bounded_under_backpressure() {
    let cfg = PipelineConfig::new(
        vec![
            p("fast", "identity").batch(2).capacity(4),
            p("slow", "delay")
                .batch(1)
                .capacity(3)
                .with_settings(serde_json::json!({"base_us": 300, "slow_fraction": 0.0})),
        ],
        &[("fast", "slow")],
    );
    let pipe = Pipeline::start(Arc::new(compile(&cfg, &registry()).unwrap()));
    let done = Arc::new(AtomicU64::new(0));
    for id in 0..300 {
        let d = Arc::clone(&done);
        pipe.submit(Submission::new(id, vec![]), move |r| {
            assert!(r.is_ok());
            d.fetch_add(1, Ordering::SeqCst);
        });
        for s in pipe.stage_stats() {
            assert!(s.queue_depth <= s.channel_capacity);
        }
    }
    while done.load(Ordering::SeqCst) < 300 {
        std::thread::sleep(Duration::from_millis(2));
    }
    for s in pipe.stage_stats() {
        assert!(s.max_queue_depth <= s.channel_capacity, "{s:?}");
    }
    let slow = pipe.stage_stats().into_iter().find(|s| s.stage == "slow").unwrap();
    assert_eq!(slow.max_queue_depth, 3, "producer should have filled the slow channel");
}

#[test]
fn shutdown_fails_in_flight_requests() {
    let cfg = PipelineConfig::new(
        vec![p("slow", "delay").with_settings(serde_json::json!({"base_us": 20000, "slow_fraction": 0.0}))],
        &[],
    );
    let mut pipe = Pipeline::start(Arc::new(compile(&cfg, &registry()).unwrap()));
    let outcomes = Arc::new(AtomicU64::new(0));
    for id in 0..10 {
        let o = Arc::clone(&outcomes);
        pipe.submit(Submission::new(id, vec![]), move |_| {
            o.fetch_add(1, Ordering::SeqCst);
        });
    }
    pipe.shutdown();
    assert_eq!(outcomes.load(Ordering::SeqCst), 10);
    assert_eq!(pipe.execute(Submission::new(1, vec![])).unwrap_err(), PipelineError::Closed);
}

#[test]
fn legacy_runner_matches_pipeline_results() {
    let cfg = PipelineConfig::new(
        vec![p("A", "identity"), p("B", "fault").with_settings(serde_json::json!({"every": 5}))],
        &[("A", "B")],
    );
    let graph = Arc::new(compile(&cfg, &registry()).unwrap());
    let legacy = LegacyRunner::new(Arc::clone(&graph), 3, 4).unwrap();
    let subs: Vec<_> = (0..40).map(|id| Submission::new(id, vec![id as u32])).collect();
    let out = legacy.run(subs.clone());
    let pipe = Pipeline::start(graph);
    for (sub, res) in subs.into_iter().zip(out) {
        let async_res = pipe.execute(sub);
        assert_eq!(res.is_ok(), async_res.is_ok());
        if let (Ok(a), Ok(b)) = (res, async_res) {
            assert_eq!(a.payload, b.payload);
            assert_eq!(a.trace.len(), 2);
        }
    }
    let diamond_graph = Arc::new(compile(&diamond(), &registry()).unwrap());
    assert!(LegacyRunner::new(diamond_graph, 1, 1).is_err());
}
