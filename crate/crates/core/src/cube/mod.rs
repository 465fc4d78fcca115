//! Read-only sparse parameter cube.
//!
//! Keys are 64-bit feature signatures, values are an embedding plus two
//! feedback statistics. Keys always live in memory (a sorted index per
//! shard); values are grouped into blocks that are either loaded into memory
//! or read from disk on demand.

mod build;
mod reload;
mod signature;
mod snapshot;
mod watch;

use std::io;

pub use build::{build, BuildOptions, PlacementPolicy};
pub use reload::{hot_reload, DoubleBuffer, Generational};
pub use signature::{fnv1a64, sign, sign_str, FeatureSignature};
pub use snapshot::CubeSnapshot;
pub use watch::{scan_latest, ModelWatcher, ReloadTrigger};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DONE_FILE: &str = "DONE";
/// Bytes per index record: signature u64, block id u32, offset u64.
pub const INDEX_RECORD_LEN: usize = 20;
pub const DEFAULT_BLOCK_SIZE: u64 = 4 * 1024 * 1024;

/// Embedding plus feedback statistics for one sparse feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseParameter {
    pub embedding: Vec<f32>,
    /// `[show, click]`
    pub feedback_stats: [f32; 2],
}

impl SparseParameter {
    pub fn new(embedding: Vec<f32>, show: f32, click: f32) -> Self {
        Self {
            embedding,
            feedback_stats: [show, click],
        }
    }

    /// Encoded size of a value with the given embedding dimension.
    pub fn encoded_len(dim: usize) -> usize {
        (dim + 2) * 4
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        for v in &self.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.feedback_stats[0].to_le_bytes());
        out.extend_from_slice(&self.feedback_stats[1].to_le_bytes());
    }

    pub fn decode(bytes: &[u8], dim: usize) -> Option<Self> {
        if bytes.len() != Self::encoded_len(dim) {
            return None;
        }
        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let embedding: Vec<f32> = floats.by_ref().take(dim).collect();
        let show = floats.next()?;
        let click = floats.next()?;
        if !(show >= 0.0 && click >= 0.0) {
            return None;
        }
        Some(Self::new(embedding, show, click))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Memory,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub id: u32,
    pub placement: Placement,
    pub byte_length: u64,
    /// Hex SHA-256 of the block file.
    pub checksum: String,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeManifest {
    pub generation: u64,
    pub embedding_dim: u32,
    pub shard_count: u32,
    pub blocks: Vec<BlockInfo>,
}

impl CubeManifest {
    pub fn read(dir: &std::path::Path) -> Result<Self, CubeError> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn block_file_name(id: u32) -> String {
    format!("block_{id}.bin")
}

pub fn shard_index_path(dir: &std::path::Path, shard: u32) -> std::path::PathBuf {
    dir.join(format!("shard_{shard}")).join("index.bin")
}

#[derive(Debug, thiserror::Error)]
pub enum CubeError {
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cube build input is empty")]
    EmptyInput,
    #[error("block size {block_size} cannot hold a value of {value_len} bytes")]
    InvalidBlockSize { block_size: u64, value_len: usize },
    #[error("invalid build options: {0}")]
    InvalidOptions(String),
    #[error("corrupt block {block}: {reason}")]
    CorruptBlock { block: u32, reason: String },
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("stale generation {offered} (serving {current})")]
    StaleGeneration { current: u64, offered: u64 },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}
