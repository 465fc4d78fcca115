//! Offline tuning: per-stage latency and resource surrogates fitted from
//! harness logs, a constrained (1+1)-CMA-ES over the mixed parameter space,
//! and validation of the best archive points on the real harness.

mod cmaes;
mod space;
mod surrogate;
mod tune;

pub use cmaes::{cma_es_constrained, minimize_unit, ArchiveEntry, CmaOptions, CmaOutcome, UnitArchiveEntry, UnitOutcome};
pub use space::{Level, ParamDescriptor, ParamKind, ParamValue, ParameterSpace, Scale, TuningPoint};
pub use surrogate::{fit_surrogates, EnsembleRegressor, NearestNeighbor, QuadRidge, StageLogRecord, SurrogatePair};
pub use tune::{
    collect_logs, tune, CollectedLogs, FinalistReport, Harness, LatencyScope, Measurement, StageMeasurement, TuneOptions,
    TuneOutcome, TuneReport,
};

#[derive(Debug, thiserror::Error)]
pub enum TuningError {
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("parameter {name:?}: {message}")]
    OutOfRange { name: String, message: String },
    #[error("stage {stage:?} has {got} log records, need at least {needed}")]
    InsufficientData { stage: String, needed: usize, got: usize },
    #[error("no feasible point found within the evaluation budget ({evaluated} candidates)")]
    NoFeasiblePointFound { evaluated: usize, archive: Vec<ArchiveEntry> },
    #[error("harness failed: {0}")]
    HarnessFailure(String),
    #[error("budget must be at least {0} evaluations")]
    BudgetTooSmall(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
