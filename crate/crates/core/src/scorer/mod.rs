//! Dense scoring network and sparse-to-dense input assembly.

mod assemble;
mod model;

pub use assemble::{assemble, assemble_signed, Combiner, FeatureGroups, FeatureSlotSpec, SlotGroup};
pub use model::{Activation, DenseLayer, DenseModel};

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error("input has {found} values, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("request references feature group {0:?} that no slot declares")]
    UnknownGroup(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    File(#[from] crate::tensor_file::TensorFileError),
}
