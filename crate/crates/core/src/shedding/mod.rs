//! Online load shedding: sort candidates by their recall-phase estimate and,
//! under overload, keep only the prefix a small regressor deems necessary.

mod detector;
mod features;
mod model;
mod oracle;

pub use detector::{CutoffTracker, OverloadConfig, OverloadDetector};
pub use features::{SheddingFeatures, FEATURE_DIM, QID_BUCKETS};
pub use model::{shed, train_pruner, PruningModel, ShedDecision, TrainConfig, TrainReport};
pub use oracle::{oracle_cutoff, oracle_cutoff_scores, recall_at, sort_candidates, ShedLogRecord};

#[derive(Debug, thiserror::Error)]
pub enum SheddingError {
    #[error("need at least {needed} shed-log records, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid pruning model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    File(#[from] crate::tensor_file::TensorFileError),
}
