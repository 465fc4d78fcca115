use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ShedLogRecord, SheddingError, SheddingFeatures, FEATURE_DIM};
use crate::tensor_file;

const KIND: &str = "pruning_mlp";
pub const MIN_TRAINING_RECORDS: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    input_dim: usize,
    hidden: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    min_keep_fraction: f64,
    epsilon: f64,
    quality_metric: String,
    dataset_hash: String,
    holdout_rmse: f64,
}

/// Two-layer perceptron predicting the keep fraction of a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningModel {
    hidden: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: f32,
    mean: Vec<f64>,
    std: Vec<f64>,
    pub min_keep_fraction: f64,
    pub epsilon: f64,
    pub dataset_hash: String,
    pub holdout_rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub holdout_fraction: f64,
    pub min_keep_fraction: f64,
    /// Quality tolerance the labels were generated with (metadata).
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            holdout_fraction: 0.2,
            min_keep_fraction: 0.01,
            epsilon: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub records: usize,
    pub train_rmse: f64,
    pub holdout_rmse: f64,
    pub epochs: usize,
}

/// Outcome of one shedding decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShedDecision {
    pub keep: usize,
    pub predicted_fraction: f64,
}

impl ShedDecision {
    pub fn cutoff_fraction(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            1.0 - self.keep as f64 / n as f64
        }
    }
}

impl PruningModel {
    fn raw(&self, features: &SheddingFeatures) -> f64 {
        let x = features.encode();
        let mut z = [0.0f64; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            z[i] = (x[i] - self.mean[i]) / self.std[i];
        }
        let mut out = self.b2 as f64;
        for h in 0..self.hidden {
            let row = &self.w1[h * FEATURE_DIM..(h + 1) * FEATURE_DIM];
            let mut a = self.b1[h] as f64;
            for i in 0..FEATURE_DIM {
                a += row[i] as f64 * z[i];
            }
            out += self.w2[h] as f64 * a.max(0.0);
        }
        out
    }

    /// Predicted keep fraction, clamped to `[min_keep_fraction, 1]`.
    pub fn predict(&self, features: &SheddingFeatures) -> f64 {
        let y = self.raw(features);
        if y.is_nan() {
            return 1.0;
        }
        y.clamp(self.min_keep_fraction, 1.0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SheddingError> {
        let header = Header {
            kind: KIND.into(),
            input_dim: FEATURE_DIM,
            hidden: self.hidden,
            mean: self.mean.clone(),
            std: self.std.clone(),
            min_keep_fraction: self.min_keep_fraction,
            epsilon: self.epsilon,
            quality_metric: "recall@N".into(),
            dataset_hash: self.dataset_hash.clone(),
            holdout_rmse: self.holdout_rmse,
        };
        let b2 = [self.b2];
        Ok(tensor_file::encode(&header, &[&self.w1, &self.b1, &self.w2, &b2])?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SheddingError> {
        let (h, body): (Header, Vec<f32>) = tensor_file::decode(bytes)?;
        if h.kind != KIND || h.input_dim != FEATURE_DIM {
            return Err(SheddingError::InvalidModel(format!(
                "expected {KIND} with {FEATURE_DIM} inputs, found {} with {}",
                h.kind, h.input_dim
            )));
        }
        let hd = h.hidden;
        if body.len() != hd * FEATURE_DIM + 2 * hd + 1 || h.mean.len() != FEATURE_DIM || h.std.len() != FEATURE_DIM {
            return Err(SheddingError::InvalidModel("tensor sizes do not match header".into()));
        }
        if body.iter().any(|v| !v.is_finite()) || h.std.iter().any(|s| !(*s > 0.0)) {
            return Err(SheddingError::InvalidModel("non-finite weights or scales".into()));
        }
        let (w1, rest) = body.split_at(hd * FEATURE_DIM);
        let (b1, rest) = rest.split_at(hd);
        let (w2, b2) = rest.split_at(hd);
        Ok(Self {
            hidden: hd,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2[0],
            mean: h.mean,
            std: h.std,
            min_keep_fraction: h.min_keep_fraction,
            epsilon: h.epsilon,
            dataset_hash: h.dataset_hash,
            holdout_rmse: h.holdout_rmse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SheddingError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| SheddingError::File(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, SheddingError> {
        let bytes = std::fs::read(path).map_err(|e| SheddingError::File(e.into()))?;
        Self::from_bytes(&bytes)
    }
}

/// Keep count for a sorted candidate list of length `n`: everything when not
/// overloaded, otherwise `max(n_slate, round(prediction * n))`, capped at n.
pub fn shed(
    model: &PruningModel,
    features: &SheddingFeatures,
    n: usize,
    n_slate: usize,
    overload: bool,
) -> ShedDecision {
    if !overload {
        return ShedDecision {
            keep: n,
            predicted_fraction: 1.0,
        };
    }
    let p = model.predict(features);
    let keep = ((p * n as f64).round() as usize).max(n_slate).min(n);
    ShedDecision {
        keep,
        predicted_fraction: p,
    }
}

fn dataset_hash(logs: &[ShedLogRecord]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for r in logs {
        h.update(serde_json::to_vec(r).expect("record serialises"));
    }
    hex::encode(&h.finalize()[..8])
}

struct Net {
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Net {
    fn forward(&self, z: &[f64], act: &mut [f64]) -> f64 {
        let mut out = self.b2;
        for h in 0..self.hidden {
            let row = &self.w1[h * FEATURE_DIM..(h + 1) * FEATURE_DIM];
            let a: f64 = self.b1[h] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
            act[h] = a;
            out += self.w2[h] * a.max(0.0);
        }
        out
    }

    fn rmse(&self, xs: &[[f64; FEATURE_DIM]], ys: &[f64], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let mut act = vec![0.0; self.hidden];
        let se: f64 = idx
            .iter()
            .map(|&i| (self.forward(&xs[i], &mut act).clamp(0.0, 1.0) - ys[i]).powi(2))
            .sum();
        (se / idx.len() as f64).sqrt()
    }
}

/// Fits the regressor to `k*/n` by minibatch gradient descent with momentum
/// on squared error. Deterministic for a given seed.
pub fn train_pruner(logs: &[ShedLogRecord], config: &TrainConfig) -> Result<(PruningModel, TrainReport), SheddingError> {
    if logs.len() < MIN_TRAINING_RECORDS {
        return Err(SheddingError::InsufficientData {
            needed: MIN_TRAINING_RECORDS,
            got: logs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw: Vec<[f64; FEATURE_DIM]> = logs.iter().map(|r| r.features.encode()).collect();
    let ys: Vec<f64> = logs.iter().map(ShedLogRecord::keep_fraction).collect();

    let mut order: Vec<usize> = (0..logs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((logs.len() as f64) * config.holdout_fraction.clamp(0.0, 0.5)).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut mean = vec![0.0; FEATURE_DIM];
    let mut std = vec![0.0; FEATURE_DIM];
    for &i in &train {
        for d in 0..FEATURE_DIM {
            mean[d] += raw[i][d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for d in 0..FEATURE_DIM {
            std[d] += (raw[i][d] - mean[d]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / train.len() as f64).sqrt();
        if *s < 1e-9 {
            *s = 1.0;
        }
    }
    let xs: Vec<[f64; FEATURE_DIM]> = raw
        .iter()
        .map(|x| {
            let mut z = [0.0; FEATURE_DIM];
            for d in 0..FEATURE_DIM {
                z[d] = (x[d] - mean[d]) / std[d];
            }
            z
        })
        .collect();

    let hd = config.hidden.max(1);
    let limit = (6.0 / (FEATURE_DIM + hd) as f64).sqrt();
    let mut net = Net {
        hidden: hd,
        w1: (0..hd * FEATURE_DIM).map(|_| rng.random_range(-limit..limit)).collect(),
        b1: vec![0.01; hd],
        w2: (0..hd).map(|_| rng.random_range(-limit..limit)).collect(),
        b2: train.iter().map(|&i| ys[i]).sum::<f64>() / train.len() as f64,
    };
    let mut v_w1 = vec![0.0; hd * FEATURE_DIM];
    let mut v_b1 = vec![0.0; hd];
    let mut v_w2 = vec![0.0; hd];
    let mut v_b2 = 0.0;
    let mut act = vec![0.0; hd];
    let bs = config.batch_size.max(1);

    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(bs) {
            let mut g_w1 = vec![0.0; hd * FEATURE_DIM];
            let mut g_b1 = vec![0.0; hd];
            let mut g_w2 = vec![0.0; hd];
            let mut g_b2 = 0.0;
            for &i in chunk {
                let out = net.forward(&xs[i], &mut act);
                let d = 2.0 * (out - ys[i]) / chunk.len() as f64;
                g_b2 += d;
                for h in 0..hd {
                    if act[h] <= 0.0 {
                        continue;
                    }
                    g_w2[h] += d * act[h];
                    let dh = d * net.w2[h];
                    g_b1[h] += dh;
                    let row = &mut g_w1[h * FEATURE_DIM..(h + 1) * FEATURE_DIM];
                    for (g, x) in row.iter_mut().zip(&xs[i]) {
                        *g += dh * x;
                    }
                }
            }
            let (lr, mu) = (config.learning_rate, config.momentum);
            for (k, g) in g_w1.iter().enumerate() {
                v_w1[k] = mu * v_w1[k] - lr * g;
                net.w1[k] += v_w1[k];
            }
            for h in 0..hd {
                v_b1[h] = mu * v_b1[h] - lr * g_b1[h];
                net.b1[h] += v_b1[h];
                v_w2[h] = mu * v_w2[h] - lr * g_w2[h];
                net.w2[h] += v_w2[h];
            }
            v_b2 = mu * v_b2 - lr * g_b2;
            net.b2 += v_b2;
        }
    }

    let report = TrainReport {
        records: logs.len(),
        train_rmse: net.rmse(&xs, &ys, &train),
        holdout_rmse: net.rmse(&xs, &ys, hold),
        epochs: config.epochs,
    };
    let model = PruningModel {
        hidden: hd,
        w1: net.w1.iter().map(|&v| v as f32).collect(),
        b1: net.b1.iter().map(|&v| v as f32).collect(),
        w2: net.w2.iter().map(|&v| v as f32).collect(),
        b2: net.b2 as f32,
        mean,
        std,
        min_keep_fraction: config.min_keep_fraction.clamp(0.0, 1.0),
        epsilon: config.epsilon,
        dataset_hash: dataset_hash(logs),
        holdout_rmse: report.holdout_rmse,
    };
    Ok((model, report))
}
