//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing the test harness capture) and then asserts.
//!
//! Run with `cargo test -p rankserve-core --test acceptance -- --test-threads=1`
//! for clean timing; the tests also serialise themselves on a lock.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::Mutex;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::cache::{LfuCache, LruMap};
use rankserve_core::experiments::{self, CriterionResult};
use rankserve_core::scorer::{Activation, DenseLayer, DenseModel};
use rankserve_core::shedding::oracle_cutoff_scores;

static SERIAL: Mutex<()> = Mutex::new(());

fn announce(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

fn check(r: &CriterionResult) {
    announce(&r.line());
    assert!(r.pass, "{}\n{}", r.line(), serde_json::to_string_pretty(&r.details).unwrap());
}

/// Mass of the `top` most popular of `universe` keys under Zipf(`s`).
fn zipf_top_mass(universe: usize, top: usize, s: f64) -> f64 {
    let w: Vec<f64> = (1..=universe).map(|r| (r as f64).powf(-s)).collect();
    w[..top].iter().sum::<f64>() / w.iter().sum::<f64>()
}

#[test]
fn criterion_1_cube_cache_hit_ratio() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let opts = experiments::CubeHitOptions::default();
    let r = experiments::criterion_cube_hit(&opts).unwrap();
    let s = r.details["zipf_exponent"].as_f64().unwrap();
    let mass = zipf_top_mass(opts.key_universe, opts.key_universe / 100, s);
    assert!((mass - 0.85).abs() < 1e-3, "calibrated exponent {s} gives top-1% mass {mass}");
    let lookups = r.details["lookups"].as_f64().unwrap();
    let hits = r.details["memory_hits"].as_f64().unwrap() + r.details["disk_hits"].as_f64().unwrap();
    assert!((hits / lookups - r.measured).abs() < 1e-9);
    assert!(lookups >= 0.99e6);
    check(&r);
}

#[test]
fn criterion_2_query_cache_savings() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_query_savings(&Default::default()).unwrap();
    let off = r.details["scorer_items_off"].as_f64().unwrap();
    let on = r.details["scorer_items_on"].as_f64().unwrap();
    assert!((1.0 - on / off - r.measured).abs() < 1e-9);
    check(&r);
}

#[test]
fn criterion_3_staged_vs_synchronous() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_throughput(&Default::default()).unwrap();
    assert_eq!(r.details["mismatched"].as_u64(), Some(0));
    check(&r);
}

#[test]
fn throughput_ratio_is_repeatable() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let a = experiments::sedp_vs_legacy(&Default::default()).unwrap().throughput_ratio;
    let b = experiments::sedp_vs_legacy(&Default::default()).unwrap().throughput_ratio;
    assert!((a - b).abs() <= 0.1 * a.min(b), "{a} vs {b}");
}

#[test]
fn criterion_4_offline_tuner() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_tuner(&Default::default()).unwrap();
    let d = r.details["cpu_cost_default"].as_f64().unwrap();
    let t = r.details["cpu_cost_recommended"].as_f64().unwrap();
    assert!((1.0 - t / d - r.measured).abs() < 1e-9);
    check(&r);
}

#[test]
fn criterion_5_constrained_cma_es() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_cma().unwrap();
    let d: Vec<f64> = serde_json::from_value(r.details["distances"].clone()).unwrap();
    let f: Vec<bool> = serde_json::from_value(r.details["feasible"].clone()).unwrap();
    let ok = d.iter().zip(&f).filter(|(d, f)| **f && **d <= 1e-2).count();
    assert_eq!(ok as f64, r.measured);
    check(&r);
}

#[test]
fn criterion_6_load_shedding() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_shedding(&Default::default()).unwrap();
    check(&r);
}

#[test]
fn criterion_7_hot_reload() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_reload(&Default::default()).unwrap();
    assert_eq!(r.details["final_generation"].as_u64(), Some(11));
    announce(&format!("  offered {:.0} req/s, achieved {:.0} req/s", r.details["offered_rps"].as_f64().unwrap(), r.details["achieved_rps"].as_f64().unwrap()));
    check(&r);
}

#[test]
fn criterion_8_multi_head_consolidation() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let r = experiments::criterion_consolidation(&Default::default()).unwrap();
    check(&r);
}

// ---------------------------------------------------------------------------
// 9. components against brute-force references

/// LFU by linear scan: evict the smallest (count, insertion order); halve
/// counts every `interval` operations.
struct ScanLfu {
    cap: usize,
    interval: u64,
    ops: u64,
    seq: u64,
    items: Vec<(u32, u64, u64)>,
}

impl ScanLfu {
    fn tick(&mut self) {
        self.ops += 1;
        if self.interval > 0 && self.ops % self.interval == 0 {
            for it in &mut self.items {
                it.1 = (it.1 / 2).max(1);
            }
        }
    }

    fn touch(&mut self, k: u32) -> bool {
        match self.items.iter_mut().find(|it| it.0 == k) {
            Some(it) => {
                it.1 += 1;
                self.tick();
                true
            }
            None => false,
        }
    }

    fn insert(&mut self, k: u32) -> Option<u32> {
        if let Some(it) = self.items.iter_mut().find(|it| it.0 == k) {
            it.1 = it.1.max(1);
            self.tick();
            return None;
        }
        let mut ev = None;
        if self.items.len() >= self.cap {
            let (pos, _) = self
                .items
                .iter()
                .enumerate()
                .min_by_key(|(_, it)| (it.1, it.2))
                .unwrap();
            ev = Some(self.items.remove(pos).0);
        }
        self.items.push((k, 1, self.seq));
        self.seq += 1;
        self.tick();
        ev
    }
}

fn lfu_agrees(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = rng.random_range(1..12usize);
    let interval = [0u64, 7, 25][rng.random_range(0..3)];
    let keys = rng.random_range(2..40u32);
    let mut real = LfuCache::with_aging(cap, interval);
    let mut sim = ScanLfu {
        cap,
        interval,
        ops: 0,
        seq: 0,
        items: Vec::new(),
    };
    for step in 0..300 {
        let k = rng.random_range(0..keys);
        let hit = real.touch(&k).is_some();
        if hit != sim.touch(k) {
            return Err(format!("seed {seed} step {step}: hit mismatch on {k}"));
        }
        if !hit {
            let ev = real.insert(k, ()).map(|(k, _)| k);
            if ev != sim.insert(k) {
                return Err(format!("seed {seed} step {step}: evicted {ev:?}"));
            }
        }
        let a: BTreeSet<u32> = real.keys().copied().collect();
        let b: BTreeSet<u32> = sim.items.iter().map(|it| it.0).collect();
        if a != b {
            return Err(format!("seed {seed} step {step}: residents differ"));
        }
        for it in &sim.items {
            if real.frequency(&it.0) != Some(it.1) {
                return Err(format!("seed {seed} step {step}: count of {}", it.0));
            }
        }
    }
    Ok(())
}

fn lru_agrees(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = rng.random_range(1..12usize);
    let keys = rng.random_range(2..40u32);
    let mut real = LruMap::new(cap);
    // Front is least recent.
    let mut sim: VecDeque<(u32, u64)> = VecDeque::new();
    for step in 0..300u64 {
        let k = rng.random_range(0..keys);
        if rng.random_bool(0.5) {
            let got = real.get(&k).copied();
            let want = sim.iter().position(|e| e.0 == k).map(|p| {
                let e = sim.remove(p).unwrap();
                sim.push_back(e);
                e.1
            });
            if got != want {
                return Err(format!("seed {seed} step {step}: get {k}"));
            }
        } else {
            let ev = real.insert(k, step).map(|(k, _)| k);
            let want = if let Some(p) = sim.iter().position(|e| e.0 == k) {
                sim.remove(p);
                sim.push_back((k, step));
                None
            } else {
                let ev = (sim.len() >= cap).then(|| sim.pop_front().unwrap().0);
                sim.push_back((k, step));
                ev
            };
            if ev != want {
                return Err(format!("seed {seed} step {step}: insert {k} evicted {ev:?}"));
            }
        }
        let order: Vec<u32> = real.keys_lru_order().copied().collect();
        let want: Vec<u32> = sim.iter().map(|e| e.0).collect();
        if order != want {
            return Err(format!("seed {seed} step {step}: recency order"));
        }
    }
    Ok(())
}

fn naive_forward(m: &DenseModel, x: &[f32]) -> f64 {
    let mut a: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for l in &m.layers {
        let mut next = vec![0.0; l.rows];
        for (r, out) in next.iter_mut().enumerate() {
            let mut z = l.bias[r] as f64;
            for c in 0..l.cols {
                z += l.weights[r * l.cols + c] as f64 * a[c];
            }
            *out = match l.activation {
                Activation::Relu => z.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                Activation::Identity => z,
            };
        }
        a = next;
    }
    a[0]
}

fn random_model(rng: &mut ChaCha8Rng) -> DenseModel {
    let input = rng.random_range(1..40usize);
    let depth = rng.random_range(0..3usize);
    let mut widths = vec![input];
    for _ in 0..depth {
        widths.push(rng.random_range(1..24usize));
    }
    widths.push(1);
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| DenseLayer {
            rows: w[1],
            cols: w[0],
            weights: (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
            bias: (0..w[1]).map(|_| rng.random_range(-0.5..0.5f32)).collect(),
            activation: if i + 2 == widths.len() {
                Activation::Sigmoid
            } else if i % 2 == 0 {
                Activation::Relu
            } else {
                Activation::Identity
            },
        })
        .collect();
    DenseModel::new(1, input, layers).unwrap()
}

/// Smallest prefix length k >= n whose top-n recall against the full list
/// loses at most `eps`, found by rescoring every prefix.
fn brute_cutoff(scores: &[f64], n: usize, eps: f64) -> usize {
    let len = scores.len();
    if n >= len {
        return len;
    }
    if n == 0 {
        return 0;
    }
    let top = |upto: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..upto).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(n);
        idx
    };
    let reference = top(len);
    (n..=len)
        .find(|&k| {
            let hits = top(k).iter().filter(|i| reference.contains(i)).count();
            1.0 - hits as f64 / n as f64 <= eps + 1e-12
        })
        .unwrap()
}

/// All lists where the members of `subset` score 1 and the rest 0, which
/// fixes the global top-n membership to exactly that subset.
fn subset_lists(len: usize, n: usize) -> Vec<Vec<f64>> {
    (0u32..1 << len)
        .filter(|m| m.count_ones() as usize == n)
        .map(|m| (0..len).map(|i| if m >> i & 1 == 1 { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Every weak ordering of `len` items, as integer score lists.
fn weak_orderings(len: usize) -> Vec<Vec<f64>> {
    fn rec(prefix: &mut Vec<f64>, len: usize, out: &mut Vec<Vec<f64>>) {
        if prefix.len() == len {
            // Keep only lists whose values form a contiguous range 0..m.
            let max = prefix.iter().cloned().fold(-1.0, f64::max) as usize;
            if (0..=max).all(|v| prefix.contains(&(v as f64))) {
                out.push(prefix.clone());
            }
            return;
        }
        for v in 0..len {
            prefix.push(v as f64);
            rec(prefix, len, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), len, &mut out);
    out
}

#[test]
fn criterion_9_components_match_references() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = std::time::Instant::now();
    let mut failures = Vec::new();

    for seed in 0..1000 {
        if let Err(e) = lfu_agrees(seed) {
            failures.push(format!("lfu {e}"));
        }
        if let Err(e) = lru_agrees(seed) {
            failures.push(format!("lru {e}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rel = 0.0f64;
    for _ in 0..1000 {
        let m = random_model(&mut rng);
        let x: Vec<f32> = (0..m.input_dim).map(|_| rng.random_range(-2.0..2.0f32)).collect();
        let want = naive_forward(&m, &x);
        let got = m.forward(&x).unwrap() as f64;
        worst_rel = worst_rel.max((got - want).abs() / want.abs().max(1e-12));
    }
    if worst_rel > 1e-6 {
        failures.push(format!("forward relative error {worst_rel}"));
    }

    let epsilons = [0.0, 0.1, 0.25, 0.5, 1.0];
    let mut cutoff_cases = 0usize;
    let mut compare = |scores: &[f64], n: usize, failures: &mut Vec<String>| {
        for &eps in &epsilons {
            cutoff_cases += 1;
            let (a, b) = (oracle_cutoff_scores(scores, n, eps), brute_cutoff(scores, n, eps));
            if a != b {
                failures.push(format!("cutoff {scores:?} n={n} eps={eps}: {a} vs {b}"));
            }
        }
    };
    for len in 1..=12 {
        for n in 1..=len {
            for s in subset_lists(len, n) {
                compare(&s, n, &mut failures);
            }
        }
    }
    for len in 1..=7 {
        for s in weak_orderings(len) {
            for n in 1..=len {
                compare(&s, n, &mut failures);
            }
        }
    }
    for _ in 0..2000 {
        let len = rng.random_range(1..60usize);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(0..8u32) as f64 / 8.0).collect();
        let n = rng.random_range(1..=len);
        compare(&s, n, &mut failures);
    }

    let pass = failures.is_empty();
    announce(&format!(
        "criterion 9 components vs references: {} (1000 LFU + 1000 LRU traces, forward max rel err {:.2e}, {} cutoff cases, {} mismatches, {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        worst_rel,
        cutoff_cases,
        failures.len(),
        started.elapsed().as_secs_f64()
    ));
    assert!(pass, "{:#?}", &failures[..failures.len().min(10)]);
}

proptest! {
    #[test]
    fn cutoff_matches_rescan(scores in prop::collection::vec(0u8..6, 1..30), n in 1usize..30, eps in 0.0f64..1.0) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let n = n.min(s.len());
        prop_assert_eq!(oracle_cutoff_scores(&s, n, eps), brute_cutoff(&s, n, eps));
    }
}
