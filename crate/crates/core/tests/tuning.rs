use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::tuning::*;

fn sphere_space(dim: usize, lo: f64, hi: f64, start: f64) -> ParameterSpace {
    ParameterSpace::new(
        (0..dim)
            .map(|i| ParamDescriptor::continuous(&format!("x{i}"), lo, hi, start))
            .collect(),
    )
    .unwrap()
}

fn coords(p: &TuningPoint, dim: usize) -> Vec<f64> {
    (0..dim).map(|i| p.f64(&format!("x{i}")).unwrap()).collect()
}

fn random_point(space: &ParameterSpace, rng: &mut ChaCha8Rng) -> TuningPoint {
    let mut p = TuningPoint::default();
    for d in &space.parameters {
        let v = match &d.kind {
            ParamKind::Integer { min, max } => ParamValue::Int(rng.random_range(*min..=*max)),
            ParamKind::Continuous { min, max } => ParamValue::Float(rng.random_range(*min..=*max)),
            ParamKind::Categorical { choices } => ParamValue::Cat(choices[rng.random_range(0..choices.len())].clone()),
        };
        p.set(&d.name, v);
    }
    p
}

#[test]
fn constrained_sphere_reaches_boundary_optimum() {
    let space = sphere_space(5, -5.0, 5.0, 3.0);
    let mut hits = 0;
    for seed in 0..10 {
        let out = cma_es_constrained(
            &space,
            &space.defaults(),
            |p| coords(p, 5).iter().map(|v| v * v).sum(),
            |p| vec![1.0 - p.f64("x0").unwrap()],
            &CmaOptions {
                budget: 2000,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.best.f64("x0").unwrap() >= 1.0);
        if (out.best_objective - 1.0).abs() <= 1e-2 {
            hits += 1;
        }
    }
    assert!(hits >= 9, "{hits}/10 seeds reached the optimum");
}

#[test]
fn unconstrained_sphere_dim10() {
    let space = sphere_space(10, -5.0, 5.0, 2.0);
    let out = cma_es_constrained(
        &space,
        &space.defaults(),
        |p| coords(p, 10).iter().map(|v| v * v).sum(),
        |_| vec![],
        &CmaOptions {
            budget: 5000,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.best_objective < 1e-6, "{}", out.best_objective);
}

#[test]
fn infeasible_everywhere_reports_archive() {
    let space = sphere_space(3, -5.0, 5.0, 0.0);
    let err = cma_es_constrained(
        &space,
        &space.defaults(),
        |_| 0.0,
        |p| vec![6.0 - p.f64("x0").unwrap()],
        &CmaOptions {
            budget: 200,
            ..Default::default()
        },
    )
    .unwrap_err();
    match err {
        TuningError::NoFeasiblePointFound { evaluated, archive } => {
            assert_eq!(evaluated, 200);
            assert_eq!(archive.len(), 200);
            assert!(archive.iter().all(|e| !e.feasible && e.objective.is_none()));
        }
        e => panic!("{e}"),
    }
}

#[test]
fn budget_below_minimum_rejected() {
    let space = sphere_space(2, 0.0, 1.0, 0.5);
    let r = cma_es_constrained(&space, &space.defaults(), |_| 0.0, |_| vec![], &CmaOptions {
        budget: 10,
        ..Default::default()
    });
    assert!(matches!(r, Err(TuningError::BudgetTooSmall(_))));
}

#[test]
fn archive_is_complete_and_flags_consistent() {
    let space = ParameterSpace::reference();
    let mut evals = 0usize;
    let out = cma_es_constrained(
        &space,
        &space.defaults(),
        |p| {
            evals += 1;
            (p.f64("dnn_batch").unwrap() - 40.0).powi(2) + p.f64("cube_cache_ratio_pct").unwrap()
        },
        |p| vec![p.f64("user_batch").unwrap() - 35.0, 8.0 - p.f64("cube_batch").unwrap()],
        &CmaOptions {
            budget: 600,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.candidates, 600);
    assert_eq!(out.archive.len(), 600);
    let evaluated = out.archive.iter().filter(|e| e.objective.is_some()).count();
    assert_eq!(evaluated, evals);
    assert_eq!(evaluated, out.objective_evaluations);
    for e in &out.archive {
        let ok = e.constraints.iter().all(|g| *g <= 0.0);
        if e.feasible {
            assert!(ok && e.objective.is_some());
        } else {
            assert!(e.objective.is_none());
        }
        space.validate(&e.point).unwrap();
    }
    let best = out
        .archive
        .iter()
        .filter(|e| e.feasible)
        .filter_map(|e| e.objective)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_objective);
}

#[test]
fn cma_is_deterministic() {
    let space = ParameterSpace::reference();
    let run = || {
        cma_es_constrained(
            &space,
            &space.defaults(),
            |p| (p.f64("arenas").unwrap() - 600.0).abs() + p.f64("query_cache_window_s").unwrap(),
            |p| vec![p.f64("item_extractor_batch").unwrap() - 30.0],
            &CmaOptions {
                budget: 400,
                seed: 77,
                ..Default::default()
            },
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn encode_decode_round_trip_random_points() {
    let space = ParameterSpace::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let p = random_point(&space, &mut rng);
        assert_eq!(space.decode(&space.encode(&p).unwrap()), p);
        let back = space.decode_unit(&space.encode_unit(&p).unwrap());
        for d in &space.parameters {
            match (&back.0[&d.name], &p.0[&d.name]) {
                (ParamValue::Float(a), ParamValue::Float(b)) => assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0)),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

proptest! {
    #[test]
    fn decode_always_lands_in_range(raw in proptest::collection::vec(-1e3f64..1e3, 10)) {
        let space = ParameterSpace::reference();
        space.validate(&space.decode(&raw)).unwrap();
        let unit: Vec<f64> = raw.iter().map(|v| v / 500.0).collect();
        space.validate(&space.decode_unit(&unit)).unwrap();
    }
}

fn batch_space() -> ParameterSpace {
    ParameterSpace::new(vec![ParamDescriptor::integer("batch", 10, 45, 20).at_stage("dnn")]).unwrap()
}

fn records_from(space: &ParameterSpace, points: &[TuningPoint], f: impl Fn(&TuningPoint) -> f64) -> Vec<StageLogRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| StageLogRecord {
            stage: "dnn".into(),
            point: p.clone(),
            latency_ms: f(p),
            resource: 1.0,
            traffic: 100.0,
            timestamp: i as f64,
        })
        .inspect(|r| space.validate(&r.point).unwrap())
        .collect()
}

#[test]
fn planted_linear_slope_recovered() {
    let space = batch_space();
    let pts: Vec<TuningPoint> = (0..120)
        .map(|i| space.decode(&[10.0 + (i % 36) as f64]))
        .collect();
    let recs = records_from(&space, &pts, |p| 2.0 * p.f64("batch").unwrap());
    let s = &fit_surrogates(&space, &recs).unwrap()["dnn"];
    let at = |b: f64| space.encode_unit(&space.decode(&[b])).unwrap();
    let slope = s.latency.ridge.predict(&s.project(&at(30.0))) - s.latency.ridge.predict(&s.project(&at(29.0)));
    assert!((slope - 2.0).abs() <= 0.01, "slope {slope}");
    for b in 10..=45 {
        let truth = 2.0 * b as f64;
        let pred = s.latency_at(&at(b as f64));
        assert!((pred - truth).abs() / truth < 0.01, "batch {b}: {pred} vs {truth}");
    }
    assert!(s.latency.holdout_rmse < 0.02 * 45.0);
}

#[test]
fn constant_records_predict_constant() {
    let space = ParameterSpace::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<TuningPoint> = (0..100).map(|_| random_point(&space, &mut rng)).collect();
    let recs = records_from(&space, &pts, |_| 7.5);
    let s = &fit_surrogates(&space, &recs).unwrap()["dnn"];
    for _ in 0..200 {
        let u = space.encode_unit(&random_point(&space, &mut rng)).unwrap();
        assert!((s.latency_at(&u) - 7.5).abs() < 1e-6);
    }
}

#[test]
fn insufficient_records_rejected() {
    let space = ParameterSpace::reference();
    // dnn reads its batch size and the five system-level parameters.
    let pts = vec![space.defaults(); 59];
    let recs = records_from(&space, &pts, |_| 1.0);
    assert!(matches!(
        fit_surrogates(&space, &recs),
        Err(TuningError::InsufficientData { needed: 60, got: 59, .. })
    ));
    let pts = vec![space.defaults(); 60];
    let s = &fit_surrogates(&space, &records_from(&space, &pts, |_| 1.0)).unwrap()["dnn"];
    assert_eq!(s.inputs.len(), 6);
}

#[test]
fn analytic_cache_curve_trend_matches() {
    // Miss-driven latency under a cache whose hit ratio saturates with capacity.
    let space = ParameterSpace::new(vec![ParamDescriptor::continuous("capacity", 0.1, 5.0, 1.0).log_scale()]).unwrap();
    let model = |c: f64| 1.0 + 10.0 * (1.0 - c / (c + 0.5));
    let pts: Vec<TuningPoint> = (0..40).map(|i| space.decode(&[0.1 + 4.9 * i as f64 / 39.0])).collect();
    let recs = records_from(&space, &pts, |p| model(p.f64("capacity").unwrap()));
    let s = &fit_surrogates(&space, &recs).unwrap()["dnn"];
    let grid: Vec<f64> = (0..40).map(|i| 0.1 + 4.9 * i as f64 / 39.0).collect();
    for w in grid.windows(2) {
        let ua = space.encode_unit(&space.decode(&[w[0]])).unwrap();
        let ub = space.encode_unit(&space.decode(&[w[1]])).unwrap();
        let d_model = model(w[1]) - model(w[0]);
        let d_pred = s.latency_at(&ub) - s.latency_at(&ua);
        assert_eq!(d_model.signum(), d_pred.signum(), "at {w:?}: {d_model} vs {d_pred}");
    }
}

/// Analytic stand-in for the serving stack.
struct Planted<F: Fn(&TuningPoint) -> Vec<(String, f64, f64)>> {
    f: F,
    runs: usize,
}

impl<F: Fn(&TuningPoint) -> Vec<(String, f64, f64)>> Harness for Planted<F> {
    fn measure(&mut self, p: &TuningPoint) -> Result<Measurement, TuningError> {
        self.runs += 1;
        Ok(Measurement {
            stages: (self.f)(p)
                .into_iter()
                .map(|(stage, latency_ms, resource)| StageMeasurement {
                    stage,
                    latency_ms,
                    resource,
                })
                .collect(),
            traffic: 100.0,
        })
    }
}

fn plan(space: &ParameterSpace, n: usize, seed: u64) -> Vec<TuningPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_point(space, &mut rng)).collect()
}

fn dnn_batch_model(p: &TuningPoint) -> Vec<(String, f64, f64)> {
    let b = p.f64("dnn_batch").unwrap();
    vec![
        ("user".into(), 5.0, 1.0),
        ("dnn".into(), 10.0, 2.0 + 40.0 / b),
    ]
}

#[test]
fn collect_logs_one_record_per_stage_per_run() {
    let space = ParameterSpace::reference();
    let mut h = Planted {
        f: |_: &TuningPoint| vec![("a".into(), 1.0, 1.0), ("b".into(), 1.0, 1.0), ("c".into(), 1.0, 1.0)],
        runs: 0,
    };
    let logs = collect_logs(&space, &mut h, &[space.defaults()], 1).unwrap();
    assert_eq!(logs.records.len(), 3);
    let logs = collect_logs(&space, &mut h, &[space.defaults()], 5).unwrap();
    assert_eq!(logs.records.len(), 15);
    assert!(logs.records.iter().all(|r| r.point == space.defaults()));

    let mut bad = space.defaults();
    bad.set("user_batch", ParamValue::Int(99));
    let before = h.runs;
    assert!(matches!(
        collect_logs(&space, &mut h, &[space.defaults(), bad], 1),
        Err(TuningError::OutOfRange { .. })
    ));
    assert_eq!(h.runs, before);
}

#[test]
fn collect_logs_drops_failed_points() {
    let space = ParameterSpace::reference();
    let mut calls = 0;
    let mut h = |p: &TuningPoint| {
        calls += 1;
        if p.i64("cube_batch") == Some(3) {
            Err(TuningError::HarnessFailure("boom".into()))
        } else {
            Ok(Measurement {
                stages: vec![StageMeasurement {
                    stage: "s".into(),
                    latency_ms: 1.0,
                    resource: 1.0,
                }],
                traffic: 1.0,
            })
        }
    };
    let mut bad = space.defaults();
    bad.set("cube_batch", ParamValue::Int(3));
    let logs = collect_logs(&space, &mut h, &[space.defaults(), bad, space.defaults()], 2).unwrap();
    assert_eq!(logs.records.len(), 4);
    assert_eq!(logs.failed.len(), 1);
    assert_eq!(logs.failed[0].0, 1);
}

#[test]
fn tune_prefers_larger_dnn_batch_in_planted_model() {
    let space = ParameterSpace::reference();
    let mut h = Planted {
        f: dnn_batch_model,
        runs: 0,
    };
    let logs = collect_logs(&space, &mut h, &plan(&space, 200, 4), 1).unwrap();
    let sur = fit_surrogates(&space, &logs.records).unwrap();
    let report = tune(&space, &sur, &mut h, &TuneOptions::default()).unwrap();
    assert_eq!(report.outcome, TuneOutcome::Improved);
    assert!(report.recommended.i64("dnn_batch").unwrap() > 15);
    assert!(report.resource_reduction > 0.0);
    assert!(report.max_latency_regression <= 0.05);
}

#[test]
fn tune_keeps_defaults_when_already_optimal() {
    let space = ParameterSpace::reference();
    let d = space.encode_unit(&space.defaults()).unwrap();
    let f = move |p: &TuningPoint| {
        let u = ParameterSpace::reference().encode_unit(p).unwrap();
        let r: f64 = u.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum();
        vec![("dnn".to_string(), 10.0, 1.0 + r)]
    };
    let mut h = Planted { f, runs: 0 };
    let logs = collect_logs(&space, &mut h, &plan(&space, 150, 8), 1).unwrap();
    let sur = fit_surrogates(&space, &logs.records).unwrap();
    let report = tune(&space, &sur, &mut h, &TuneOptions::default()).unwrap();
    assert_eq!(report.recommended, space.defaults());
    assert_eq!(report.max_latency_regression, 0.0);
    assert_eq!(report.resource_reduction, 0.0);
}

#[test]
fn tune_never_recommends_latency_regression() {
    // Resource falls with user batch but latency rises with it; the surrogate
    // constraint and the measured check both have to hold.
    let space = ParameterSpace::reference();
    let f = |p: &TuningPoint| {
        let b = p.f64("user_batch").unwrap();
        let c = p.f64("cube_batch").unwrap();
        vec![
            ("user".to_string(), 2.0 + 0.5 * b, 100.0 / b),
            ("cube".to_string(), 4.0, 10.0 / c),
        ]
    };
    let mut h = Planted { f, runs: 0 };
    let logs = collect_logs(&space, &mut h, &plan(&space, 200, 2), 1).unwrap();
    let sur = fit_surrogates(&space, &logs.records).unwrap();
    let report = tune(&space, &sur, &mut h, &TuneOptions::default()).unwrap();
    assert!(report.max_latency_regression <= 0.05);
    for fin in &report.finalists {
        let reg = fin.measured.stage("user").unwrap().latency_ms / report.default_measured.stage("user").unwrap().latency_ms - 1.0;
        assert_eq!(fin.eligible, reg <= 0.05);
    }
    let b = report.recommended.f64("user_batch").unwrap();
    assert!(2.0 + 0.5 * b <= 1.05 * 17.0);
    let _: BTreeMap<String, (f64, f64)> = report.surrogate_rmse;
}
