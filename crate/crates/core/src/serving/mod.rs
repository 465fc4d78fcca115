//! Serving stack: model bundles, the reference ranking pipeline and its
//! operators, caches, load shedding, hot reload and metrics.

mod bundle;
mod config;
mod metrics;
mod ops;
mod payload;
mod stack;

pub use bundle::{generation_dir, write_bundle, Head, HeadSpec, ModelBundle, DENSE_FILE, HEADS_FILE};
pub use config::{reference_pipeline, stages, AllocatorKnobs, QueryCacheSettings, SheddingSettings, StackConfig};
pub use metrics::{parse_text, render, CubeCacheMetrics, QueryCacheMetrics, ShedMetrics, StackMetrics, StageSnapshotOwned};
pub use ops::{serving_registry, DnnSettings, OpContext, ServingCounters, ShedState};
pub use payload::{ItemState, RankPayload, SignedGroups};
pub use stack::ServingStack;

#[derive(Debug, thiserror::Error)]
pub enum ServingError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model load failed: {0}")]
    ModelLoad(String),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Cube(#[from] crate::cube::CubeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
