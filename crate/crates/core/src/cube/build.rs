use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    block_file_name, shard_index_path, BlockInfo, CubeError, CubeManifest, Placement,
    SparseParameter, DEFAULT_BLOCK_SIZE, DONE_FILE, MANIFEST_FILE,
};
use crate::cube::sign;

/// Which value blocks are kept resident in memory when the cube is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    AllMemory,
    AllDisk,
    /// The first blocks (in signature order) up to this many bytes are
    /// memory-resident, the rest stay on disk.
    MemoryBudget(u64),
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub generation: u64,
    pub shard_count: u32,
    pub block_size_bytes: u64,
    pub placement: PlacementPolicy,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            generation: 1,
            shard_count: 1,
            block_size_bytes: DEFAULT_BLOCK_SIZE,
            placement: PlacementPolicy::AllMemory,
        }
    }
}

/// Write a cube directory from `(raw feature, value)` pairs.
///
/// Later duplicates of a raw feature replace earlier ones. The `DONE`
/// sentinel is written last, so a directory without it is incomplete.
pub fn build<I, K>(pairs: I, options: &BuildOptions, dir: &Path) -> Result<CubeManifest, CubeError>
where
    I: IntoIterator<Item = (K, SparseParameter)>,
    K: AsRef<[u8]>,
{
    if options.shard_count == 0 {
        return Err(CubeError::InvalidOptions("shard_count must be positive".into()));
    }
    let mut dim: Option<usize> = None;
    let mut values: BTreeMap<u64, SparseParameter> = BTreeMap::new();
    for (raw, param) in pairs {
        let d = param.embedding.len();
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(CubeError::DimensionMismatch { expected, found: d })
            }
            _ => {}
        }
        values.insert(sign(raw.as_ref()).0, param);
    }
    let dim = dim.ok_or(CubeError::EmptyInput)?;
    if dim == 0 {
        return Err(CubeError::InvalidOptions("embedding dimension must be positive".into()));
    }
    let value_len = SparseParameter::encoded_len(dim);
    if options.block_size_bytes <= value_len as u64 {
        return Err(CubeError::InvalidBlockSize {
            block_size: options.block_size_bytes,
            value_len,
        });
    }

    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(DONE_FILE));

    // Lay values out in signature order, cutting a new block whenever the
    // next value would overflow the current one.
    let mut blocks: Vec<Vec<u8>> = vec![Vec::new()];
    let mut shard_records: Vec<Vec<(u64, u32, u64)>> = vec![Vec::new(); options.shard_count as usize];
    for (&sig, param) in &values {
        if blocks.last().unwrap().len() + value_len > options.block_size_bytes as usize {
            blocks.push(Vec::new());
        }
        let block_id = (blocks.len() - 1) as u32;
        let current = blocks.last_mut().unwrap();
        let offset = current.len() as u64;
        param.encode_into(current);
        let shard = (sig % u64::from(options.shard_count)) as usize;
        shard_records[shard].push((sig, block_id, offset));
    }

    let mut infos = Vec::with_capacity(blocks.len());
    let mut memory_bytes = 0u64;
    for (id, bytes) in blocks.iter().enumerate() {
        let id = id as u32;
        fs::write(dir.join(block_file_name(id)), bytes)?;
        let len = bytes.len() as u64;
        let placement = match options.placement {
            PlacementPolicy::AllMemory => Placement::Memory,
            PlacementPolicy::AllDisk => Placement::Disk,
            PlacementPolicy::MemoryBudget(budget) => {
                if memory_bytes + len <= budget {
                    memory_bytes += len;
                    Placement::Memory
                } else {
                    Placement::Disk
                }
            }
        };
        infos.push(BlockInfo {
            id,
            placement,
            byte_length: len,
            checksum: hex::encode(Sha256::digest(bytes)),
        });
    }

    for (shard, records) in shard_records.iter().enumerate() {
        let path = shard_index_path(dir, shard as u32);
        fs::create_dir_all(path.parent().unwrap())?;
        let mut w = BufWriter::new(File::create(&path)?);
        // BTreeMap iteration order keeps every shard sorted by signature.
        for &(sig, block, offset) in records {
            w.write_all(&sig.to_le_bytes())?;
            w.write_all(&block.to_le_bytes())?;
            w.write_all(&offset.to_le_bytes())?;
        }
        w.flush()?;
    }

    let manifest = CubeManifest {
        generation: options.generation,
        embedding_dim: dim as u32,
        shard_count: options.shard_count,
        blocks: infos,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    File::create(dir.join(DONE_FILE))?.sync_all()?;
    Ok(manifest)
}
