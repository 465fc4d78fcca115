use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Level, ParameterSpace, TuningError, TuningPoint};

/// One stage's measurements from one harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLogRecord {
    pub stage: String,
    pub point: TuningPoint,
    /// Mean per-event latency through the stage, milliseconds.
    pub latency_ms: f64,
    /// CPU seconds per 10^3 tasks handled by the stage.
    pub resource: f64,
    /// Offered load during the run, requests per second.
    pub traffic: f64,
    pub timestamp: f64,
}

/// Ridge regression over a full quadratic expansion of the unit-box encoding.
#[derive(Debug, Clone)]
pub struct QuadRidge {
    coef: DVector<f64>,
    dim: usize,
}

fn quad_features(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut f = Vec::with_capacity(1 + d + d * (d + 1) / 2);
    f.push(1.0);
    f.extend_from_slice(x);
    for i in 0..d {
        for j in i..d {
            f.push(x[i] * x[j]);
        }
    }
    f
}

impl QuadRidge {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let rows: Vec<Vec<f64>> = xs.iter().map(|x| quad_features(x)).collect();
        let p = rows.first().map_or(1, Vec::len);
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        let y = DVector::from_column_slice(ys);
        let mut gram = x.transpose() * &x;
        for j in 1..p {
            gram[(j, j)] += lambda;
        }
        // Tiny jitter on the intercept keeps a constant-only fit solvable.
        gram[(0, 0)] += 1e-12;
        let rhs = x.transpose() * y;
        let coef = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(p));
        Self { coef, dim }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        quad_features(x).iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct NearestNeighbor {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl NearestNeighbor {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Self {
        Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (p, y) in self.xs.iter().zip(&self.ys) {
            let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *y);
            }
        }
        best.1
    }
}

/// Equal-weight mean of the quadratic ridge and the 1-NN predictor.
#[derive(Debug, Clone)]
pub struct EnsembleRegressor {
    pub ridge: QuadRidge,
    pub knn: NearestNeighbor,
    /// RMSE on the held-out fifth, with both members fitted on the rest.
    pub holdout_rmse: f64,
}

pub const RIDGE_LAMBDA: f64 = 1e-6;

impl EnsembleRegressor {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Self {
        let (mut tx, mut ty, mut hx, mut hy) = (vec![], vec![], vec![], vec![]);
        for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
            if i % 5 == 4 {
                hx.push(x.clone());
                hy.push(*y);
            } else {
                tx.push(x.clone());
                ty.push(*y);
            }
        }
        let holdout_rmse = if hx.is_empty() || tx.is_empty() {
            f64::NAN
        } else {
            let part = Self {
                ridge: QuadRidge::fit(&tx, &ty, RIDGE_LAMBDA),
                knn: NearestNeighbor::fit(&tx, &ty),
                holdout_rmse: f64::NAN,
            };
            let se: f64 = hx.iter().zip(&hy).map(|(x, y)| (part.predict(x) - y).powi(2)).sum();
            (se / hx.len() as f64).sqrt()
        };
        Self {
            ridge: QuadRidge::fit(xs, ys, RIDGE_LAMBDA),
            knn: NearestNeighbor::fit(xs, ys),
            holdout_rmse,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        0.5 * (self.ridge.predict(x) + self.knn.predict(x))
    }
}

/// Latency and resource models for one stage. The models read only the
/// coordinates listed in `inputs`: the stage's own parameters and the
/// system-level ones.
#[derive(Debug, Clone)]
pub struct SurrogatePair {
    pub stage: String,
    pub inputs: Vec<usize>,
    pub latency: EnsembleRegressor,
    pub resource: EnsembleRegressor,
    pub records: usize,
}

impl SurrogatePair {
    /// Keeps the coordinates of a full unit-space point this stage reads.
    pub fn project(&self, unit: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|&i| unit[i]).collect()
    }

    pub fn latency_at(&self, unit: &[f64]) -> f64 {
        self.latency.predict(&self.project(unit))
    }

    pub fn resource_at(&self, unit: &[f64]) -> f64 {
        self.resource.predict(&self.project(unit))
    }
}

/// Fits one pair of models per stage. Each stage needs at least ten records
/// per parameter it reads.
pub fn fit_surrogates(
    space: &ParameterSpace,
    records: &[StageLogRecord],
) -> Result<BTreeMap<String, SurrogatePair>, TuningError> {
    let mut by_stage: BTreeMap<&str, Vec<&StageLogRecord>> = BTreeMap::new();
    for r in records {
        by_stage.entry(&r.stage).or_default().push(r);
    }
    if by_stage.is_empty() {
        return Err(TuningError::InsufficientData {
            stage: String::new(),
            needed: space.dim() * 10,
            got: 0,
        });
    }
    let mut out = BTreeMap::new();
    for (stage, rs) in by_stage {
        let inputs: Vec<usize> = space
            .parameters
            .iter()
            .enumerate()
            .filter(|(_, p)| p.level == Level::System || p.stage.as_deref() == Some(stage))
            .map(|(i, _)| i)
            .collect();
        let needed = inputs.len().max(1) * 10;
        if rs.len() < needed {
            return Err(TuningError::InsufficientData {
                stage: stage.to_string(),
                needed,
                got: rs.len(),
            });
        }
        let xs = rs
            .iter()
            .map(|r| space.encode_unit(&r.point).map(|u| inputs.iter().map(|&i| u[i]).collect()))
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        let lat: Vec<f64> = rs.iter().map(|r| r.latency_ms).collect();
        let res: Vec<f64> = rs.iter().map(|r| r.resource).collect();
        out.insert(
            stage.to_string(),
            SurrogatePair {
                stage: stage.to_string(),
                inputs,
                latency: EnsembleRegressor::fit(&xs, &lat),
                resource: EnsembleRegressor::fit(&xs, &res),
                records: rs.len(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_recovers_quadratic() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0, ((i * 7) % 50) as f64 / 49.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1]).collect();
        let m = QuadRidge::fit(&xs, &ys, 1e-9);
        assert!((m.predict(&[0.3, 0.6]) - (1.0 + 0.6 - 0.6 + 0.54)).abs() < 1e-4);
    }

    #[test]
    fn knn_returns_nearest() {
        let m = NearestNeighbor::fit(&[vec![0.0], vec![1.0]], &[5.0, 9.0]);
        assert_eq!(m.predict(&[0.4]), 5.0);
        assert_eq!(m.predict(&[0.6]), 9.0);
    }
}
