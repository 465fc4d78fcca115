use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{cma_es_constrained, CmaOptions, ParameterSpace, StageLogRecord, SurrogatePair, TuningError, TuningPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeasurement {
    pub stage: String,
    pub latency_ms: f64,
    /// CPU seconds per 10^3 tasks.
    pub resource: f64,
}

/// One harness run at one configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Measurement {
    pub stages: Vec<StageMeasurement>,
    pub traffic: f64,
}

impl Measurement {
    pub fn total_resource(&self) -> f64 {
        self.stages.iter().map(|s| s.resource).sum()
    }

    pub fn stage(&self, name: &str) -> Option<&StageMeasurement> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Per-stage mean over several runs. Stages missing from any run are dropped.
    pub fn average(runs: &[Measurement]) -> Measurement {
        let Some(first) = runs.first() else {
            return Measurement::default();
        };
        let n = runs.len() as f64;
        let stages = first
            .stages
            .iter()
            .filter_map(|s| {
                let all: Option<Vec<&StageMeasurement>> = runs.iter().map(|r| r.stage(&s.stage)).collect();
                let all = all?;
                Some(StageMeasurement {
                    stage: s.stage.clone(),
                    latency_ms: all.iter().map(|m| m.latency_ms).sum::<f64>() / n,
                    resource: all.iter().map(|m| m.resource).sum::<f64>() / n,
                })
            })
            .collect();
        Measurement {
            stages,
            traffic: runs.iter().map(|r| r.traffic).sum::<f64>() / n,
        }
    }
}

/// Something that can run the system at a configuration and report
/// per-stage latency and resource use.
pub trait Harness {
    fn measure(&mut self, point: &TuningPoint) -> Result<Measurement, TuningError>;
}

impl<F> Harness for F
where
    F: FnMut(&TuningPoint) -> Result<Measurement, TuningError>,
{
    fn measure(&mut self, point: &TuningPoint) -> Result<Measurement, TuningError> {
        self(point)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollectedLogs {
    pub records: Vec<StageLogRecord>,
    /// Plan index and error text for runs that failed. Their records are dropped.
    pub failed: Vec<(usize, String)>,
}

/// Runs every plan point `repetitions` times and emits one record per stage
/// per run. Every point is range-checked before anything runs.
pub fn collect_logs(
    space: &ParameterSpace,
    harness: &mut dyn Harness,
    plan: &[TuningPoint],
    repetitions: usize,
) -> Result<CollectedLogs, TuningError> {
    for p in plan {
        space.validate(p)?;
    }
    let mut out = CollectedLogs::default();
    let mut t = 0.0;
    for (i, p) in plan.iter().enumerate() {
        let mut recs = Vec::new();
        let mut failed = None;
        for _ in 0..repetitions.max(1) {
            match harness.measure(p) {
                Ok(m) => {
                    for s in m.stages {
                        recs.push(StageLogRecord {
                            stage: s.stage,
                            point: p.clone(),
                            latency_ms: s.latency_ms,
                            resource: s.resource,
                            traffic: m.traffic,
                            timestamp: t,
                        });
                    }
                    t += 1.0;
                }
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        match failed {
            Some(e) => out.failed.push((i, e)),
            None => out.records.extend(recs),
        }
    }
    if out.records.is_empty() && !plan.is_empty() {
        return Err(TuningError::HarnessFailure(format!(
            "all {} plan points failed; first: {}",
            plan.len(),
            out.failed.first().map_or("", |f| f.1.as_str())
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneOptions {
    pub cma: CmaOptions,
    pub finalists: usize,
    /// A finalist may exceed a stage's default latency by at most this fraction.
    pub latency_slack: f64,
    pub validation_repetitions: usize,
    pub latency_scope: LatencyScope,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            cma: CmaOptions::default(),
            finalists: 5,
            latency_slack: 0.05,
            validation_repetitions: 1,
            latency_scope: LatencyScope::AllStages,
        }
    }
}

/// Which stages carry a latency constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyScope {
    #[default]
    AllStages,
    /// Only stages that some parameter of the space is attached to. The
    /// other stages are still measured and reported.
    TunedStages,
}

impl LatencyScope {
    fn covers(self, space: &ParameterSpace, stage: &str) -> bool {
        match self {
            LatencyScope::AllStages => true,
            LatencyScope::TunedStages => space.parameters.iter().any(|d| d.stage.as_deref() == Some(stage)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuneOutcome {
    Improved,
    /// No finalist beat the defaults within the latency budget.
    AllFinalistsRegressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalistReport {
    pub point: TuningPoint,
    pub predicted_resource: f64,
    pub predicted_latency_ms: BTreeMap<String, f64>,
    pub measured: Measurement,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub outcome: TuneOutcome,
    pub recommended: TuningPoint,
    pub defaults: TuningPoint,
    pub default_measured: Measurement,
    pub recommended_measured: Measurement,
    /// `1 - recommended / default` total resource, measured.
    pub resource_reduction: f64,
    /// Largest relative latency increase of the recommendation over the
    /// constrained stages.
    pub max_latency_regression: f64,
    pub max_latency_regression_all_stages: f64,
    pub finalists: Vec<FinalistReport>,
    pub candidates: usize,
    pub objective_evaluations: usize,
    pub feasible_archive_points: usize,
    pub surrogate_best_objective: f64,
    pub surrogate_rmse: BTreeMap<String, (f64, f64)>,
}

fn max_regression(m: &Measurement, base: &Measurement, include: impl Fn(&str) -> bool) -> Option<f64> {
    let mut worst = f64::NEG_INFINITY;
    for b in base.stages.iter().filter(|b| include(&b.stage)) {
        let s = m.stage(&b.stage)?;
        let r = if b.latency_ms > 0.0 {
            s.latency_ms / b.latency_ms - 1.0
        } else if s.latency_ms > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        worst = worst.max(r);
    }
    Some(if worst == f64::NEG_INFINITY { 0.0 } else { worst })
}

/// Minimises the summed resource surrogates subject to each constrained
/// stage's latency surrogate staying at or below its prediction for the
/// defaults, then
/// validates the best few distinct archive points on the harness.
pub fn tune(
    space: &ParameterSpace,
    surrogates: &BTreeMap<String, SurrogatePair>,
    harness: &mut dyn Harness,
    opts: &TuneOptions,
) -> Result<TuneReport, TuningError> {
    let defaults = space.defaults();
    let d_unit = space.encode_unit(&defaults)?;
    let scope = |stage: &str| opts.latency_scope.covers(space, stage);
    let constrained: Vec<&SurrogatePair> = surrogates.iter().filter(|(k, _)| scope(k)).map(|(_, s)| s).collect();
    let base_lat: Vec<f64> = constrained.iter().map(|s| s.latency_at(&d_unit)).collect();
    let unit = |p: &TuningPoint| space.encode_unit(p).expect("decoded points are in range");
    let objective = |p: &TuningPoint| {
        let u = unit(p);
        surrogates.values().map(|s| s.resource_at(&u)).sum::<f64>()
    };
    let constraints = |p: &TuningPoint| {
        let u = unit(p);
        constrained
            .iter()
            .zip(&base_lat)
            .map(|(s, b)| s.latency_at(&u) - b)
            .collect::<Vec<f64>>()
    };
    let out = cma_es_constrained(space, &defaults, objective, constraints, &opts.cma)?;

    let mut ranked: Vec<(&TuningPoint, f64)> = out
        .archive
        .iter()
        .filter(|e| e.feasible)
        .filter_map(|e| e.objective.map(|f| (&e.point, f)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut picked: Vec<(TuningPoint, f64)> = Vec::new();
    for (p, f) in ranked {
        if picked.len() >= opts.finalists {
            break;
        }
        if *p != defaults && !picked.iter().any(|(q, _)| q == p) {
            picked.push((p.clone(), f));
        }
    }

    let reps = opts.validation_repetitions.max(1);
    let mut run = |p: &TuningPoint| -> Result<Measurement, TuningError> {
        let runs = (0..reps).map(|_| harness.measure(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(Measurement::average(&runs))
    };
    let default_measured = run(&defaults)?;
    let base_resource = default_measured.total_resource();

    let mut finalists = Vec::new();
    for (p, f) in picked {
        let measured = run(&p)?;
        let u = unit(&p);
        let eligible = max_regression(&measured, &default_measured, scope).is_some_and(|r| r <= opts.latency_slack);
        finalists.push(FinalistReport {
            predicted_latency_ms: surrogates
                .iter()
                .map(|(k, s)| (k.clone(), s.latency_at(&u)))
                .collect(),
            point: p,
            predicted_resource: f,
            measured,
            eligible,
        });
    }

    let best = finalists
        .iter()
        .filter(|f| f.eligible && f.measured.total_resource() < base_resource)
        .min_by(|a, b| a.measured.total_resource().total_cmp(&b.measured.total_resource()));
    let (outcome, recommended, rec_measured) = match best {
        Some(f) => (TuneOutcome::Improved, f.point.clone(), f.measured.clone()),
        None => (TuneOutcome::AllFinalistsRegressed, defaults.clone(), default_measured.clone()),
    };
    let resource_reduction = if base_resource > 0.0 {
        1.0 - rec_measured.total_resource() / base_resource
    } else {
        0.0
    };
    let max_latency_regression = max_regression(&rec_measured, &default_measured, scope).unwrap_or(0.0);
    let max_latency_regression_all_stages = max_regression(&rec_measured, &default_measured, |_| true).unwrap_or(0.0);
    Ok(TuneReport {
        outcome,
        recommended,
        defaults,
        default_measured,
        recommended_measured: rec_measured,
        resource_reduction,
        max_latency_regression,
        max_latency_regression_all_stages,
        finalists,
        candidates: out.candidates,
        objective_evaluations: out.objective_evaluations,
        feasible_archive_points: out.archive.iter().filter(|e| e.feasible).count(),
        surrogate_best_objective: out.best_objective,
        surrogate_rmse: surrogates
            .iter()
            .map(|(k, s)| (k.clone(), (s.latency.holdout_rmse, s.resource.holdout_rmse)))
            .collect(),
    })
}
