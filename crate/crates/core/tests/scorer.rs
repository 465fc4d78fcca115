use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankserve_core::cube::sign_str;
use rankserve_core::scorer::{
    assemble, Activation, Combiner, DenseLayer, DenseModel, FeatureGroups, FeatureSlotSpec, ScorerError,
};
use rankserve_core::FeatureSignature;

fn layer(rows: usize, cols: usize, act: Activation, rng: &mut ChaCha8Rng) -> DenseLayer {
    DenseLayer {
        rows,
        cols,
        weights: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        bias: (0..rows).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        activation: act,
    }
}

fn two_layer(input: usize, hidden: usize, seed: u64) -> DenseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        layer(hidden, input, Activation::Relu, &mut rng),
        layer(1, hidden, Activation::Sigmoid, &mut rng),
    ];
    DenseModel::new(3, input, layers).unwrap()
}

/// Straight-line evaluation with explicit loops, for comparison.
fn reference(m: &DenseModel, x: &[f32]) -> f64 {
    let mut h: Vec<f64> = x.iter().map(|v| *v as f64).collect();
    for l in &m.layers {
        let mut out = Vec::with_capacity(l.rows);
        for r in 0..l.rows {
            let mut z = l.bias[r] as f64;
            for c in 0..l.cols {
                z += l.weights[r * l.cols + c] as f64 * h[c];
            }
            out.push(match l.activation {
                Activation::Relu => if z > 0.0 { z } else { 0.0 },
                Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                Activation::Identity => z,
            });
        }
        h = out;
    }
    h[0]
}

#[test]
fn sigmoid_of_zero_input() {
    let m = DenseModel::new(
        1,
        2,
        vec![
            DenseLayer {
                rows: 2,
                cols: 2,
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            },
            DenseLayer {
                rows: 1,
                cols: 2,
                weights: vec![1.0, 1.0],
                bias: vec![0.0],
                activation: Activation::Sigmoid,
            },
        ],
    )
    .unwrap();
    assert_eq!(m.forward(&[0.0, 0.0]).unwrap(), 0.5);
}

#[test]
fn random_models_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..200 {
        let m = two_layer(rng.random_range(1..64), rng.random_range(1..48), seed);
        let x: Vec<f32> = (0..m.input_dim).map(|_| rng.random_range(-3.0..3.0f32)).collect();
        let want = reference(&m, &x);
        let got = m.forward(&x).unwrap() as f64;
        assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn batch_equals_serial_and_is_deterministic() {
    let m = two_layer(24, 16, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f32>> = (0..64).map(|_| (0..24).map(|_| rng.random_range(-2.0..2.0f32)).collect()).collect();
    let flat: Vec<f32> = rows.concat();
    let batch = m.forward_batch(&flat).unwrap();
    let serial: Vec<f32> = rows.iter().map(|r| m.forward(r).unwrap()).collect();
    assert_eq!(
        batch.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        serial.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(m.forward_batch(&flat).unwrap(), batch);
}

#[test]
fn rejects_bad_shapes_and_values() {
    let m = two_layer(4, 3, 1);
    assert!(matches!(m.forward(&[0.0; 3]), Err(ScorerError::DimensionMismatch { expected: 4, found: 3 })));
    assert!(m.forward_batch(&[0.0; 6]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bad = layer(1, 4, Activation::Sigmoid, &mut rng);
    bad.weights[0] = f32::NAN;
    assert!(DenseModel::new(1, 4, vec![bad]).is_err());
    let mismatched = vec![layer(3, 4, Activation::Relu, &mut rng), layer(1, 2, Activation::Sigmoid, &mut rng)];
    assert!(DenseModel::new(1, 4, mismatched).is_err());
    let not_sigmoid = vec![layer(1, 4, Activation::Relu, &mut rng)];
    assert!(DenseModel::new(1, 4, not_sigmoid).is_err());
    assert!(DenseModel::new(1, 4, vec![]).is_err());
}

#[test]
fn file_round_trip_is_exact() {
    let m = two_layer(10, 7, 4);
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("dense.bin");
    m.save(&path).unwrap();
    assert_eq!(DenseModel::load(&path).unwrap(), m);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    assert!(DenseModel::from_bytes(&bytes).is_err());
}

#[test]
fn assemble_then_forward_matches_manual_input() {
    let dim = 3;
    let table: HashMap<FeatureSignature, Vec<f32>> = [("a", [1.0, 2.0, 3.0]), ("b", [3.0, 2.0, 1.0]), ("c", [0.5, 0.5, 0.5])]
        .into_iter()
        .map(|(k, v)| (sign_str(k), v.to_vec()))
        .collect();
    let slots = FeatureSlotSpec {
        slots: vec![
            rankserve_core::scorer::SlotGroup {
                group: "user".into(),
                combiner: Combiner::Mean,
            },
            rankserve_core::scorer::SlotGroup {
                group: "item".into(),
                combiner: Combiner::Sum,
            },
        ],
    };
    let feats = FeatureGroups::from([
        ("user".to_string(), vec!["a".to_string(), "b".to_string()]),
        ("item".to_string(), vec!["c".to_string(), "unknown".to_string(), "c".to_string()]),
    ]);
    let x = assemble(&feats, &slots, dim, |s| table.get(&s).map(Vec::as_slice)).unwrap();
    assert_eq!(x, vec![2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
    let m = two_layer(6, 5, 8);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&[2.0, 2.0, 2.0, 1.0, 1.0, 1.0]).unwrap());
}

proptest! {
    #[test]
    fn scores_stay_in_unit_interval(seed in any::<u64>(), x in prop::collection::vec(-50.0f32..50.0, 12)) {
        let m = two_layer(12, 8, seed);
        let s = m.forward(&x).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn absent_groups_and_features_are_zero(groups in prop::collection::vec("[a-d]", 1..4), dim in 1usize..6) {
        let slots = FeatureSlotSpec::new(["a", "b", "c", "d"], Combiner::Sum);
        let feats: FeatureGroups = groups.iter().map(|g| (g.clone(), vec![format!("{g}-x")])).collect();
        let x = assemble(&feats, &slots, dim, |_| None).unwrap();
        prop_assert_eq!(x, vec![0.0; 4 * dim]);
    }
}
