//! Staged event-driven pipeline.
//!
//! A pipeline is a DAG of stage processors. Each processor owns one bounded
//! FIFO channel that every inbound edge feeds, and runs its operator on up to
//! `parallelism` worker threads, each taking up to `batch_size` queued events
//! per invocation without waiting for a batch to fill.

mod config;
mod engine;
mod event;
mod graph;
mod join;
mod legacy;
mod operator;
mod stats;
mod tenant;

pub use config::{EdgeConfig, PipelineConfig, ProcessorConfig, TenantConfig, SCHEMA_VERSION};
pub use engine::{Pipeline, Submission};
pub use event::{Completed, Event, Payload, StageTiming};
pub use graph::{compile, PipelineGraph, StageProcessor};
pub use join::JoinBuffer;
pub use legacy::LegacyRunner;
pub use operator::{BuildContext, DelayOperator, Emitter, Operator, OperatorError, OperatorRegistry};
pub use stats::{StageSnapshot, StageStats};
pub use tenant::{choose_tenant, dispatch_tenant, stable_hash64, TenantSplit};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PipelineError {
    #[error("pipeline graph has a cycle through {0:?}")]
    CycleDetected(Vec<String>),
    #[error("processor {id:?} uses unknown operator kind {kind:?}")]
    UnknownOperator { id: String, kind: String },
    #[error("edge {from:?} -> {to:?} references a missing processor")]
    DanglingEdge { from: String, to: String },
    #[error("duplicate processor id {0:?}")]
    DuplicateId(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("request {request_id} exceeded its deadline{}", stage.as_ref().map(|s| format!(" at stage {s}")).unwrap_or_default())]
    DeadlineExceeded { request_id: u64, stage: Option<String> },
    #[error("stage {stage} failed on request {request_id}: {message}")]
    StageFailure {
        request_id: u64,
        stage: String,
        message: String,
    },
    #[error("join at stage {stage} timed out for request {request_id}")]
    JoinTimeout { request_id: u64, stage: String },
    #[error("tenant split table is empty")]
    NoTenants,
    #[error("pipeline is shut down")]
    Closed,
}
