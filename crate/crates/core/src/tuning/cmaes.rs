use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ParameterSpace, TuningError, TuningPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaOptions {
    /// Candidate budget. Every sampled candidate counts, feasible or not.
    pub budget: usize,
    pub seed: u64,
    /// Initial step size in unit-box coordinates.
    pub sigma0: f64,
    /// Stop early once the step size collapses below this.
    pub min_sigma: f64,
}

impl Default for CmaOptions {
    fn default() -> Self {
        Self {
            budget: 3000,
            seed: 0,
            sigma0: 0.3,
            min_sigma: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitArchiveEntry {
    pub x: Vec<f64>,
    /// `None` when the candidate was rejected before the objective ran.
    pub objective: Option<f64>,
    pub constraints: Vec<f64>,
    pub in_box: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitOutcome {
    pub best: Option<(Vec<f64>, f64)>,
    pub archive: Vec<UnitArchiveEntry>,
    pub candidates: usize,
    pub objective_evaluations: usize,
    pub final_sigma: f64,
}

fn in_box(x: &[f64]) -> bool {
    x.iter().all(|v| (0.0..=1.0).contains(v))
}

/// (1+1)-CMA-ES with active covariance updates and constraint handling by
/// shrinking the covariance along smoothed infeasible directions. Searches
/// the unit box `[0, 1]^dim`; the box faces act as additional linear
/// constraints. `constraints(x)` returns values that must all be `<= 0`.
pub fn minimize_unit<F, G>(dim: usize, x0: &[f64], mut objective: F, mut constraints: G, opts: &CmaOptions) -> UnitOutcome
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(dim > 0 && x0.len() == dim);
    let n = dim as f64;
    let d = 1.0 + n / 2.0;
    let c = 2.0 / (n + 2.0);
    let c_p = 1.0 / 12.0;
    let p_target = 2.0 / 11.0;
    let c_plus = 2.0 / (n * n + 6.0);
    let c_minus_base = 0.4 / (n.powf(1.6) + 1.0);
    let c_c = 1.0 / (n + 2.0);
    let beta = 0.1 / (n + 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut archive = Vec::new();
    let mut candidates = 0usize;
    let mut evals = 0usize;

    let mut check = |x: &[f64], archive: &mut Vec<UnitArchiveEntry>, candidates: &mut usize| -> (bool, Vec<f64>) {
        *candidates += 1;
        let clamped: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let g = constraints(&clamped);
        let ok_box = in_box(x);
        let feasible = ok_box && g.iter().all(|v| *v <= 0.0);
        if !feasible {
            archive.push(UnitArchiveEntry {
                x: x.to_vec(),
                objective: None,
                constraints: g.clone(),
                in_box: ok_box,
                feasible,
            });
        }
        (feasible, g)
    };

    // Find a feasible parent.
    let mut parent: Option<(Vec<f64>, f64)> = None;
    let mut start = x0.to_vec();
    while candidates < opts.budget {
        let (ok, g) = check(&start, &mut archive, &mut candidates);
        if ok {
            let f = objective(&start);
            evals += 1;
            archive.push(UnitArchiveEntry {
                x: start.clone(),
                objective: Some(f),
                constraints: g,
                in_box: true,
                feasible: true,
            });
            parent = Some((start.clone(), f));
            break;
        }
        start = (0..dim).map(|_| rng.random::<f64>()).collect();
    }
    let Some((x, fx)) = parent else {
        return UnitOutcome {
            best: None,
            archive,
            candidates,
            objective_evaluations: evals,
            final_sigma: opts.sigma0,
        };
    };

    let mut x = DVector::from_vec(x);
    let mut fx = fx;
    let mut sigma = opts.sigma0;
    let mut a = DMatrix::<f64>::identity(dim, dim);
    let mut s = DVector::<f64>::zeros(dim);
    let mut p_succ = p_target;
    let mut ancestors: VecDeque<f64> = VecDeque::from([fx]);
    let mut vs: Vec<DVector<f64>> = Vec::new();

    while candidates < opts.budget && sigma > opts.min_sigma {
        let z = DVector::<f64>::from_iterator(dim, (0..dim).map(|_| rng.sample(StandardNormal)));
        let az = &a * &z;
        let y = &x + sigma * &az;
        let ys = y.as_slice();
        let (feasible, g) = check(ys, &mut archive, &mut candidates);

        if !feasible {
            // Box faces first, then user constraints.
            let mut violated = Vec::with_capacity(2 * dim + g.len());
            violated.extend(ys.iter().map(|v| *v < 0.0));
            violated.extend(ys.iter().map(|v| *v > 1.0));
            violated.extend(g.iter().map(|v| *v > 0.0));
            if vs.len() < violated.len() {
                vs.resize(violated.len(), DVector::zeros(dim));
            }
            let count = violated.iter().filter(|b| **b).count();
            if count > 0 {
                let lu = a.clone().lu();
                let mut delta = DMatrix::<f64>::zeros(dim, dim);
                for (j, hit) in violated.iter().enumerate() {
                    if !hit {
                        continue;
                    }
                    vs[j] = (1.0 - c_c) * &vs[j] + c_c * &az;
                    if let Some(w) = lu.solve(&vs[j]) {
                        let ww = w.dot(&w);
                        if ww > 0.0 && ww.is_finite() {
                            delta += &vs[j] * w.transpose() / ww;
                        }
                    }
                }
                a -= delta * (beta / count as f64);
            }
            continue;
        }

        let fy = objective(ys);
        evals += 1;
        archive.push(UnitArchiveEntry {
            x: ys.to_vec(),
            objective: Some(fy),
            constraints: g,
            in_box: true,
            feasible: true,
        });

        if fy <= fx {
            x = y;
            fx = fy;
            p_succ = (1.0 - c_p) * p_succ + c_p;
            s = (1.0 - c) * &s + (c * (2.0 - c)).sqrt() * &az;
            if let Some(w) = a.clone().lu().solve(&s) {
                let ww = w.dot(&w);
                if ww > 0.0 && ww.is_finite() {
                    let k = (1.0 - c_plus).sqrt();
                    let coef = k / ww * ((1.0 + c_plus * ww / (1.0 - c_plus)).sqrt() - 1.0);
                    a = k * &a + coef * &s * w.transpose();
                }
            }
            ancestors.push_back(fx);
            if ancestors.len() > 6 {
                ancestors.pop_front();
            }
        } else {
            p_succ *= 1.0 - c_p;
            if ancestors.len() >= 6 && fy > ancestors[0] {
                let zz = z.dot(&z);
                let mut c_minus = c_minus_base;
                if 1.0 < c_minus * (2.0 * zz - 1.0) {
                    c_minus = 1.0 / (2.0 * zz - 1.0);
                }
                let k = (1.0 + c_minus).sqrt();
                let coef = k / zz * ((1.0 - c_minus * zz / (1.0 + c_minus)).max(0.0).sqrt() - 1.0);
                a = k * &a + coef * &az * z.transpose();
            }
        }
        sigma *= ((p_succ - p_target) / (d * (1.0 - p_target))).exp();
    }

    UnitOutcome {
        best: Some((x.as_slice().to_vec(), fx)),
        archive,
        candidates,
        objective_evaluations: evals,
        final_sigma: sigma,
    }
}

pub const MIN_BUDGET: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub point: TuningPoint,
    pub objective: Option<f64>,
    pub constraints: Vec<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaOutcome {
    pub best: TuningPoint,
    pub best_objective: f64,
    pub archive: Vec<ArchiveEntry>,
    pub candidates: usize,
    pub objective_evaluations: usize,
}

/// Runs [`minimize_unit`] over a mixed parameter space. Candidates are
/// decoded (integers rounded, categoricals snapped) before evaluation.
pub fn cma_es_constrained<F, G>(
    space: &ParameterSpace,
    start: &TuningPoint,
    mut objective: F,
    mut constraints: G,
    opts: &CmaOptions,
) -> Result<CmaOutcome, TuningError>
where
    F: FnMut(&TuningPoint) -> f64,
    G: FnMut(&TuningPoint) -> Vec<f64>,
{
    if opts.budget < MIN_BUDGET {
        return Err(TuningError::BudgetTooSmall(MIN_BUDGET));
    }
    let x0 = space.encode_unit(start)?;
    let out = minimize_unit(
        space.dim(),
        &x0,
        |u| objective(&space.decode_unit(u)),
        |u| constraints(&space.decode_unit(u)),
        opts,
    );
    let archive: Vec<ArchiveEntry> = out
        .archive
        .into_iter()
        .map(|e| ArchiveEntry {
            point: space.decode_unit(&e.x),
            objective: e.objective,
            constraints: e.constraints,
            feasible: e.feasible,
        })
        .collect();
    match out.best {
        Some((u, f)) => Ok(CmaOutcome {
            best: space.decode_unit(&u),
            best_objective: f,
            archive,
            candidates: out.candidates,
            objective_evaluations: out.objective_evaluations,
        }),
        None => Err(TuningError::NoFeasiblePointFound {
            evaluated: out.candidates,
            archive,
        }),
    }
}
