use serde::{Deserialize, Serialize};

use crate::pipeline::stable_hash64;

pub const QID_BUCKETS: usize = 16;
/// quota, previous cutoff, qid one-hot, four escore statistics.
pub const FEATURE_DIM: usize = 2 + QID_BUCKETS + 4;

/// Inputs to the cutoff regressor for one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheddingFeatures {
    /// Resource headroom in [0, 1].
    pub quota: f64,
    /// Fraction cut from the previous request.
    pub cutoff_ratio_prev: f64,
    /// Item-queue identifier.
    pub qid: u64,
    pub escore_avg: f64,
    pub escore_variance: f64,
    pub escore_max: f64,
    pub escore_min: f64,
}

impl SheddingFeatures {
    /// Computes the escore statistics (population variance). An empty list
    /// gives all-zero statistics.
    pub fn from_escores(quota: f64, cutoff_ratio_prev: f64, qid: u64, escores: &[f32]) -> Self {
        let n = escores.len() as f64;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &e in escores {
            let e = e as f64;
            min = min.min(e);
            max = max.max(e);
            sum += e;
        }
        let (avg, var) = if escores.is_empty() {
            (min, max) = (0.0, 0.0);
            (0.0, 0.0)
        } else {
            let avg = sum / n;
            let var = escores.iter().map(|&e| (e as f64 - avg).powi(2)).sum::<f64>() / n;
            (avg.clamp(min, max), var)
        };
        Self {
            quota: quota.clamp(0.0, 1.0),
            cutoff_ratio_prev: cutoff_ratio_prev.clamp(0.0, 1.0),
            qid,
            escore_avg: avg,
            escore_variance: var,
            escore_max: max,
            escore_min: min,
        }
    }

    pub fn qid_bucket(&self) -> usize {
        (stable_hash64(self.qid) % QID_BUCKETS as u64) as usize
    }

    pub fn encode(&self) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        x[0] = self.quota;
        x[1] = self.cutoff_ratio_prev;
        x[2 + self.qid_bucket()] = 1.0;
        let s = 2 + QID_BUCKETS;
        x[s] = self.escore_avg;
        x[s + 1] = self.escore_variance;
        x[s + 2] = self.escore_max;
        x[s + 3] = self.escore_min;
        x
    }
}
