use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::cube::{
    block_file_name, build, hot_reload, scan_latest, sign_str, BuildOptions, CubeError, CubeSnapshot, DoubleBuffer,
    ModelWatcher, Placement, PlacementPolicy, DONE_FILE,
};
use rankserve_core::SparseParameter;
use tempfile::TempDir;

fn values(n: usize, dim: usize, seed: u64) -> Vec<(String, SparseParameter)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let emb = (0..dim).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            (format!("f{i}"), SparseParameter::new(emb, rng.random_range(0.0..100.0), rng.random_range(0.0..10.0)))
        })
        .collect()
}

/// Every value's first embedding component is the generation.
fn tagged(n: usize, generation: u64) -> Vec<(String, SparseParameter)> {
    (0..n)
        .map(|i| (format!("f{i}"), SparseParameter::new(vec![generation as f32, i as f32], 1.0, 0.0)))
        .collect()
}

fn opts(generation: u64, shards: u32, block: u64, placement: PlacementPolicy) -> BuildOptions {
    BuildOptions {
        generation,
        shard_count: shards,
        block_size_bytes: block,
        placement,
    }
}

#[test]
fn round_trip_is_exhaustive_across_layouts() {
    let data = values(3000, 6, 1);
    for (shards, block, placement) in [
        (1, 1 << 20, PlacementPolicy::AllMemory),
        (4, 512, PlacementPolicy::AllDisk),
        (3, 1024, PlacementPolicy::MemoryBudget(8 * 1024)),
    ] {
        let dir = TempDir::new().unwrap();
        let m = build(data.iter().map(|(k, v)| (k.as_bytes(), v.clone())), &opts(1, shards, block, placement), dir.path()).unwrap();
        assert_eq!(m.shard_count, shards);
        let snap = CubeSnapshot::load(dir.path()).unwrap();
        assert_eq!(snap.key_count(), data.len());
        for (k, v) in &data {
            let got = snap.get(sign_str(k)).unwrap().unwrap();
            assert_eq!(got.embedding.iter().map(|f| f.to_bits()).collect::<Vec<_>>(), v.embedding.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
            assert_eq!(got.feedback_stats, v.feedback_stats);
        }
        assert_eq!(snap.get(sign_str("absent")).unwrap(), None);
        let keys: Vec<_> = data.iter().map(|(k, _)| sign_str(k)).collect();
        let batch = snap.lookup(&keys).unwrap();
        assert!(batch.iter().zip(&data).all(|(g, (_, v))| g.as_ref() == Some(v)));
        if placement == PlacementPolicy::AllDisk {
            assert!(m.blocks.iter().all(|b| b.placement == Placement::Disk));
        }
        if let PlacementPolicy::MemoryBudget(_) = placement {
            assert!(m.blocks.iter().any(|b| b.placement == Placement::Memory));
            assert!(m.blocks.iter().any(|b| b.placement == Placement::Disk));
        }
    }
}

#[test]
fn later_duplicates_win() {
    let dir = TempDir::new().unwrap();
    let a = SparseParameter::new(vec![1.0], 0.0, 0.0);
    let b = SparseParameter::new(vec![2.0], 0.0, 0.0);
    build([("x", a), ("x", b.clone())], &BuildOptions::default(), dir.path()).unwrap();
    let snap = CubeSnapshot::load(dir.path()).unwrap();
    assert_eq!(snap.key_count(), 1);
    assert_eq!(snap.get(sign_str("x")).unwrap(), Some(b));
}

#[test]
fn build_rejects_bad_input() {
    let dir = TempDir::new().unwrap();
    let none: Vec<(&str, SparseParameter)> = vec![];
    assert!(matches!(build(none, &BuildOptions::default(), dir.path()), Err(CubeError::EmptyInput)));
    let mixed = vec![("a", SparseParameter::new(vec![1.0], 0.0, 0.0)), ("b", SparseParameter::new(vec![1.0, 2.0], 0.0, 0.0))];
    assert!(matches!(build(mixed, &BuildOptions::default(), dir.path()), Err(CubeError::DimensionMismatch { .. })));
    let big = vec![("a", SparseParameter::new(vec![0.0; 64], 0.0, 0.0))];
    assert!(matches!(
        build(big, &opts(1, 1, 16, PlacementPolicy::AllMemory), dir.path()),
        Err(CubeError::InvalidBlockSize { .. })
    ));
    let one = vec![("a", SparseParameter::new(vec![0.0], 0.0, 0.0))];
    assert!(matches!(build(one, &opts(1, 0, 1024, PlacementPolicy::AllMemory), dir.path()), Err(CubeError::InvalidOptions(_))));
}

#[test]
fn incomplete_or_corrupt_directories_do_not_load() {
    let data = values(200, 4, 2);
    let dir = TempDir::new().unwrap();
    build(data.iter().map(|(k, v)| (k.as_bytes(), v.clone())), &opts(1, 2, 256, PlacementPolicy::AllMemory), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(DONE_FILE)).unwrap();
    assert!(CubeSnapshot::load(dir.path()).is_err());

    let dir = TempDir::new().unwrap();
    build(data.iter().map(|(k, v)| (k.as_bytes(), v.clone())), &opts(1, 2, 256, PlacementPolicy::AllDisk), dir.path()).unwrap();
    let block = dir.path().join(block_file_name(0));
    let mut bytes = std::fs::read(&block).unwrap();
    bytes[3] ^= 0xff;
    std::fs::write(&block, bytes).unwrap();
    assert!(CubeSnapshot::load(dir.path()).is_err());
}

#[test]
fn reload_generations_strictly_increase() {
    let root = TempDir::new().unwrap();
    let dirs: Vec<_> = (1..=3)
        .map(|g| {
            let d = root.path().join(format!("g{g}"));
            build(tagged(50, g), &opts(g, 1, 4096, PlacementPolicy::AllMemory), &d).unwrap();
            d
        })
        .collect();
    let buf = DoubleBuffer::new(CubeSnapshot::load(&dirs[0]).unwrap());
    assert_eq!(hot_reload(&buf, &dirs[2]).unwrap().generation(), 3);
    assert!(matches!(hot_reload(&buf, &dirs[1]), Err(CubeError::StaleGeneration { current: 3, offered: 2 })));
    assert!(matches!(hot_reload(&buf, &dirs[2]), Err(CubeError::StaleGeneration { .. })));
    assert_eq!(buf.generation(), 3);
}

#[test]
fn failed_reload_keeps_serving_old_snapshot() {
    let root = TempDir::new().unwrap();
    let good = root.path().join("g1");
    let bad = root.path().join("g2");
    build(tagged(50, 1), &BuildOptions::default(), &good).unwrap();
    build(tagged(50, 2), &opts(2, 1, 4096, PlacementPolicy::AllMemory), &bad).unwrap();
    std::fs::write(bad.join(block_file_name(0)), b"garbage").unwrap();
    let buf = DoubleBuffer::new(CubeSnapshot::load(&good).unwrap());
    assert!(hot_reload(&buf, &bad).is_err());
    assert_eq!(buf.generation(), 1);
    assert_eq!(buf.current().get(sign_str("f3")).unwrap().unwrap().embedding[0], 1.0);
}

fn check_batch(snap: &CubeSnapshot, keys: &[rankserve_core::FeatureSignature]) {
    let g = snap.generation() as f32;
    for v in snap.lookup(keys).unwrap() {
        assert_eq!(v.unwrap().embedding[0], g, "batch mixed generations");
    }
}

#[test]
fn concurrent_lookups_never_mix_generations() {
    let root = TempDir::new().unwrap();
    let n = 400;
    let build_gen = |g: u64| {
        let d = root.path().join(format!("g{g}"));
        build(tagged(n, g), &opts(g, 2, 512, PlacementPolicy::MemoryBudget(2048)), &d).unwrap();
        d
    };
    let buf = Arc::new(DoubleBuffer::new(CubeSnapshot::load(&build_gen(1)).unwrap()));
    let keys: Arc<Vec<_>> = Arc::new((0..n).map(|i| sign_str(&format!("f{i}"))).collect());
    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let (buf, keys, stop) = (buf.clone(), keys.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut seen = Vec::new();
                while !stop.load(Ordering::Relaxed) {
                    let snap = buf.current();
                    check_batch(&snap, &keys);
                    if seen.last() != Some(&snap.generation()) {
                        seen.push(snap.generation());
                    }
                }
                seen
            })
        })
        .collect();
    for g in 2..=8 {
        let d = build_gen(g);
        hot_reload(&buf, &d).unwrap();
        std::thread::sleep(Duration::from_millis(5));
    }
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        let seen = r.join().unwrap();
        assert!(seen.windows(2).all(|w| w[0] < w[1]), "generation went backwards: {seen:?}");
    }
}

fn publish(root: &Path, g: u64) {
    let staging = root.join(format!(".staging{g}"));
    build(tagged(10, g), &opts(g, 1, 4096, PlacementPolicy::AllMemory), &staging).unwrap();
    std::fs::rename(&staging, root.join(format!("{g:020}"))).unwrap();
}

#[test]
fn scanner_picks_newest_complete_generation() {
    let root = TempDir::new().unwrap();
    assert!(scan_latest(root.path(), 0).unwrap().is_none());
    publish(root.path(), 1);
    publish(root.path(), 3);
    // Complete except for the sentinel.
    let partial = root.path().join(format!("{:020}", 5));
    build(tagged(10, 5), &opts(5, 1, 4096, PlacementPolicy::AllMemory), &partial).unwrap();
    std::fs::remove_file(partial.join(DONE_FILE)).unwrap();
    let t = scan_latest(root.path(), 1).unwrap().unwrap();
    assert_eq!(t.generation, 3);
    assert!(scan_latest(root.path(), 3).unwrap().is_none());
}

#[test]
fn watcher_reports_new_generations() {
    let root = TempDir::new().unwrap();
    publish(root.path(), 1);
    let w = ModelWatcher::spawn(root.path().to_path_buf(), Duration::from_millis(10), 1);
    publish(root.path(), 2);
    let t = w.triggers().recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(t.generation, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn arbitrary_cubes_round_trip(
        entries in prop::collection::btree_map("[a-z0-9]{1,12}", prop::collection::vec(-1e3f32..1e3, 3), 1..120),
        shards in 1u32..5,
        block in 21u64..400,
    ) {
        let dir = TempDir::new().unwrap();
        let data: BTreeMap<String, SparseParameter> = entries
            .into_iter()
            .map(|(k, e)| (k, SparseParameter::new(e, 1.0, 0.5)))
            .collect();
        build(data.iter().map(|(k, v)| (k.as_bytes(), v.clone())), &opts(1, shards, block, PlacementPolicy::MemoryBudget(block * 2)), dir.path()).unwrap();
        let snap = CubeSnapshot::load(dir.path()).unwrap();
        prop_assert_eq!(snap.key_count(), data.len());
        for (k, v) in &data {
            let got = snap.get(sign_str(k)).unwrap();
            prop_assert_eq!(got.as_ref(), Some(v));
        }
    }
}
