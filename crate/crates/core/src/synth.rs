//! Synthetic model bundles for tests, benchmarks and the CLI.
//!
//! Embeddings are drawn for every raw feature the workload generator can
//! emit (`k0` .. `k{universe-1}`) and each head is a small random MLP. The
//! model keeps everything in memory as well, so callers can score requests
//! directly and compare against a running stack.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{sign_str, BuildOptions, CubeManifest, FeatureSignature, SparseParameter};
use crate::request::InferenceRequest;
use crate::scorer::{assemble, Activation, Combiner, DenseLayer, DenseModel, FeatureGroups, FeatureSlotSpec, ScorerError};
use crate::serving::{write_bundle, ServingError};
use crate::workload::{generate, WorkloadError, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Serving(#[from] ServingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthHead {
    pub name: String,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub key_universe: usize,
    pub embedding_dim: usize,
    pub embedding_std: f64,
    pub hidden: usize,
    /// Empty means one head `main` over every workload group.
    pub heads: Vec<SynthHead>,
    /// When set, each head's output bias is chosen so that this share of
    /// calibration pairs scores at least 0.5.
    pub admit_fraction: Option<f64>,
    /// Requests used for calibration are drawn from this workload.
    pub calibration: WorkloadSpec,
    pub calibration_requests: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            key_universe: 100_000,
            embedding_dim: 8,
            embedding_std: 0.5,
            hidden: 32,
            heads: Vec::new(),
            admit_fraction: None,
            calibration: WorkloadSpec {
                duration_s: 60.0,
                base_rate: 20.0,
                recurrence_prob: 0.0,
                ..WorkloadSpec::default()
            },
            calibration_requests: 500,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Spec whose key universe and feature groups follow `workload`.
    pub fn for_workload(workload: &WorkloadSpec) -> Self {
        Self {
            key_universe: workload.key_universe,
            calibration: WorkloadSpec {
                duration_s: 60.0,
                base_rate: 20.0,
                recurrence_prob: 0.0,
                feedback_prob: 0.0,
                seed: workload.seed ^ 0x5eed,
                ..workload.clone()
            },
            ..Self::default()
        }
    }

    /// Three heads over the workload groups. They share every group except
    /// one each: the last user group, and the last two item groups.
    pub fn with_shared_heads(mut self) -> Self {
        let w = &self.calibration;
        let (users, items) = (&w.user_groups, &w.item_groups);
        let mut shared: Vec<String> = users[..users.len() - 1].to_vec();
        shared.extend(items[..items.len() - 2].iter().cloned());
        let specific = [
            users[users.len() - 1].clone(),
            items[items.len() - 2].clone(),
            items[items.len() - 1].clone(),
        ];
        self.heads = ["ctr", "dwell", "like"]
            .iter()
            .zip(specific)
            .map(|(name, own)| {
                let mut groups = shared.clone();
                groups.push(own);
                SynthHead {
                    name: name.to_string(),
                    groups,
                }
            })
            .collect();
        self
    }

    fn head_specs(&self) -> Vec<SynthHead> {
        if !self.heads.is_empty() {
            return self.heads.clone();
        }
        let w = &self.calibration;
        vec![SynthHead {
            name: "main".into(),
            groups: w.user_groups.iter().chain(&w.item_groups).cloned().collect(),
        }]
    }
}

/// Share of feature groups of `a` that `b` also reads.
pub fn shared_group_fraction(a: &SynthHead, b: &SynthHead) -> f64 {
    let common = a.groups.iter().filter(|g| b.groups.contains(g)).count();
    common as f64 / a.groups.len().max(1) as f64
}

/// An in-memory synthetic model that can also be written as a bundle.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub generation: u64,
    pub embedding_dim: usize,
    embeddings: Vec<Vec<f32>>,
    index: HashMap<FeatureSignature, usize>,
    pub heads: Vec<(String, DenseModel, FeatureSlotSpec)>,
}

fn gaussian_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64, activation: Activation) -> DenseLayer {
    let n = Normal::new(0.0, std).expect("positive std");
    DenseLayer {
        rows,
        cols,
        weights: (0..rows * cols).map(|_| n.sample(rng) as f32).collect(),
        bias: vec![0.0; rows],
        activation,
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

impl SynthModel {
    pub fn generate(spec: &SynthSpec, generation: u64) -> Result<Self, SynthError> {
        if spec.key_universe == 0 || spec.embedding_dim == 0 || spec.hidden == 0 {
            return Err(SynthError::Invalid("universe, embedding_dim and hidden must be positive".into()));
        }
        if spec.admit_fraction.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(SynthError::Invalid("admit_fraction must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let emb = Normal::new(0.0, spec.embedding_std).map_err(|e| SynthError::Invalid(e.to_string()))?;
        let dim = spec.embedding_dim;
        let embeddings: Vec<Vec<f32>> = (0..spec.key_universe)
            .map(|_| (0..dim).map(|_| emb.sample(&mut rng) as f32).collect())
            .collect();
        let index = (0..spec.key_universe).map(|r| (sign_str(&format!("k{r}")), r)).collect();

        let mut heads = Vec::new();
        for h in spec.head_specs() {
            if h.groups.is_empty() {
                return Err(SynthError::Invalid(format!("head {} reads no groups", h.name)));
            }
            let slots = FeatureSlotSpec::new(h.groups.iter().cloned(), Combiner::Sum);
            let input = slots.input_dim(dim);
            let layers = vec![
                gaussian_layer(&mut rng, spec.hidden, input, 2.0 / (input as f64).sqrt(), Activation::Relu),
                gaussian_layer(&mut rng, 1, spec.hidden, 2.0 / (spec.hidden as f64).sqrt(), Activation::Sigmoid),
            ];
            heads.push((h.name, DenseModel::new(generation, input, layers)?, slots));
        }
        let mut model = Self {
            generation,
            embedding_dim: dim,
            embeddings,
            index,
            heads,
        };
        if let Some(admit) = spec.admit_fraction {
            model.calibrate(spec, admit)?;
        }
        Ok(model)
    }

    fn calibrate(&mut self, spec: &SynthSpec, admit: f64) -> Result<(), SynthError> {
        let requests: Vec<InferenceRequest> = generate(&spec.calibration)?
            .into_iter()
            .take(spec.calibration_requests)
            .map(|r| r.request)
            .collect();
        if requests.is_empty() {
            return Err(SynthError::Invalid("calibration workload produced no requests".into()));
        }
        for h in 0..self.heads.len() {
            let mut logits = Vec::new();
            {
                let (_, model, slots) = &self.heads[h];
                let mut linear = model.clone();
                let last = linear.layers.last_mut().unwrap();
                last.activation = Activation::Identity;
                last.bias[0] = 0.0;
                for req in &requests {
                    for c in &req.candidates {
                        let x = self.input(req, &c.features, slots)?;
                        logits.push(f64::from(linear.forward(&x)?));
                    }
                }
            }
            logits.sort_by(f64::total_cmp);
            let bias = -quantile(&logits, 1.0 - admit);
            self.heads[h].1.layers.last_mut().unwrap().bias[0] = bias as f32;
        }
        Ok(())
    }

    /// Same weights and embeddings under another generation number.
    pub fn with_generation(&self, generation: u64) -> Self {
        let mut m = self.clone();
        m.generation = generation;
        for (_, model, _) in &mut m.heads {
            model.generation = generation;
        }
        m
    }

    pub fn key_universe(&self) -> usize {
        self.embeddings.len()
    }

    pub fn head_names(&self) -> Vec<String> {
        self.heads.iter().map(|(n, _, _)| n.clone()).collect()
    }

    pub fn embedding(&self, sig: FeatureSignature) -> Option<&[f32]> {
        self.index.get(&sig).map(|&i| self.embeddings[i].as_slice())
    }

    fn input(&self, req: &InferenceRequest, item: &FeatureGroups, slots: &FeatureSlotSpec) -> Result<Vec<f32>, SynthError> {
        let groups: FeatureGroups = req
            .user_features
            .iter()
            .chain(item)
            .filter(|(g, _)| slots.contains(g))
            .map(|(g, f)| (g.clone(), f.clone()))
            .collect();
        Ok(assemble(&groups, slots, self.embedding_dim, |s| self.embedding(s))?)
    }

    /// Reference scores of every candidate under head `head`, in candidate
    /// order.
    pub fn score(&self, req: &InferenceRequest, head: &str) -> Result<Vec<f32>, SynthError> {
        let (_, model, slots) = self
            .heads
            .iter()
            .find(|(n, _, _)| n == head)
            .ok_or_else(|| SynthError::Invalid(format!("no head named {head:?}")))?;
        req.candidates
            .iter()
            .map(|c| Ok(model.forward(&self.input(req, &c.features, slots)?)?))
            .collect()
    }

    pub fn scores(&self, req: &InferenceRequest) -> Result<BTreeMap<String, Vec<f32>>, SynthError> {
        self.heads.iter().map(|(n, _, _)| Ok((n.clone(), self.score(req, n)?))).collect()
    }

    /// Writes a complete generation directory (cube, heads, `DONE` last).
    pub fn write(&self, dir: &Path, options: &BuildOptions) -> Result<CubeManifest, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.generation ^ 0xc0be);
        let pairs = self.embeddings.iter().enumerate().map(|(r, e)| {
            let show = rng.random_range(1..1000) as f32;
            let click = (show * rng.random::<f32>() * 0.1).round();
            (format!("k{r}"), SparseParameter::new(e.clone(), show, click))
        });
        Ok(write_bundle(dir, self.generation, pairs, &self.heads, options)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        let w = WorkloadSpec {
            key_universe: 500,
            ..WorkloadSpec::default()
        };
        SynthSpec {
            calibration_requests: 200,
            ..SynthSpec::for_workload(&w)
        }
    }

    #[test]
    fn calibration_hits_admit_fraction() {
        let spec = SynthSpec {
            admit_fraction: Some(0.3),
            ..small()
        };
        let m = SynthModel::generate(&spec, 1).unwrap();
        let reqs: Vec<_> = generate(&spec.calibration).unwrap().into_iter().take(200).collect();
        let (mut hi, mut n) = (0, 0);
        for r in &reqs {
            for s in m.score(&r.request, "main").unwrap() {
                hi += usize::from(s >= 0.5);
                n += 1;
            }
        }
        let frac = hi as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }

    #[test]
    fn shared_heads_overlap() {
        let spec = small().with_shared_heads();
        assert_eq!(spec.heads.len(), 3);
        for a in &spec.heads {
            for b in &spec.heads {
                assert!(shared_group_fraction(a, b) >= 0.8);
            }
        }
    }

    #[test]
    fn deterministic_and_regenerated() {
        let a = SynthModel::generate(&small(), 3).unwrap();
        let b = SynthModel::generate(&small(), 3).unwrap();
        assert_eq!(a.heads, b.heads);
        let c = a.with_generation(4);
        assert_eq!(c.heads[0].1.generation, 4);
        assert_eq!(c.heads[0].1.layers, a.heads[0].1.layers);
    }
}
