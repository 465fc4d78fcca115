use std::fs::{self, File};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    block_file_name, shard_index_path, CubeError, CubeManifest, FeatureSignature, Placement,
    SparseParameter, DONE_FILE, INDEX_RECORD_LEN,
};

#[derive(Debug)]
enum Block {
    Memory(Vec<u8>),
    Disk { file: File, len: u64 },
}

#[derive(Debug, Default)]
struct ShardIndex {
    signatures: Vec<u64>,
    locations: Vec<(u32, u64)>,
}

/// An immutable, fully verified cube generation.
#[derive(Debug)]
pub struct CubeSnapshot {
    manifest: CubeManifest,
    dir: PathBuf,
    shards: Vec<ShardIndex>,
    blocks: Vec<Block>,
    value_len: usize,
}

impl CubeSnapshot {
    /// Load and verify a cube directory. Every block checksum is checked and
    /// every index entry must point inside its block. A directory without the
    /// completion sentinel is refused.
    pub fn load(dir: &Path) -> Result<Self, CubeError> {
        if !dir.join(DONE_FILE).is_file() {
            return Err(CubeError::VerificationFailed(format!(
                "{} has no {DONE_FILE} sentinel",
                dir.display()
            )));
        }
        let manifest = CubeManifest::read(dir)?;
        if manifest.embedding_dim == 0 || manifest.shard_count == 0 {
            return Err(CubeError::VerificationFailed(
                "manifest declares zero dimension or shard count".into(),
            ));
        }
        let value_len = SparseParameter::encoded_len(manifest.embedding_dim as usize);

        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        for (pos, info) in manifest.blocks.iter().enumerate() {
            if info.id as usize != pos {
                return Err(CubeError::VerificationFailed(format!(
                    "block ids must be dense, found {} at position {pos}",
                    info.id
                )));
            }
            let path = dir.join(block_file_name(info.id));
            let bytes = fs::read(&path)?;
            if bytes.len() as u64 != info.byte_length {
                return Err(CubeError::VerificationFailed(format!(
                    "block {} has {} bytes, manifest says {}",
                    info.id,
                    bytes.len(),
                    info.byte_length
                )));
            }
            if hex::encode(Sha256::digest(&bytes)) != info.checksum {
                return Err(CubeError::VerificationFailed(format!(
                    "block {} checksum mismatch",
                    info.id
                )));
            }
            blocks.push(match info.placement {
                Placement::Memory => Block::Memory(bytes),
                Placement::Disk => Block::Disk {
                    file: File::open(&path)?,
                    len: info.byte_length,
                },
            });
        }

        let mut shards = Vec::with_capacity(manifest.shard_count as usize);
        for shard in 0..manifest.shard_count {
            let raw = fs::read(shard_index_path(dir, shard))?;
            if raw.len() % INDEX_RECORD_LEN != 0 {
                return Err(CubeError::VerificationFailed(format!(
                    "shard {shard} index length {} is not a multiple of {INDEX_RECORD_LEN}",
                    raw.len()
                )));
            }
            let mut index = ShardIndex::default();
            for rec in raw.chunks_exact(INDEX_RECORD_LEN) {
                let sig = u64::from_le_bytes(rec[0..8].try_into().unwrap());
                let block = u32::from_le_bytes(rec[8..12].try_into().unwrap());
                let offset = u64::from_le_bytes(rec[12..20].try_into().unwrap());
                if sig % u64::from(manifest.shard_count) != u64::from(shard) {
                    return Err(CubeError::VerificationFailed(format!(
                        "signature {sig:#x} stored in wrong shard {shard}"
                    )));
                }
                if index.signatures.last().is_some_and(|&prev| prev >= sig) {
                    return Err(CubeError::VerificationFailed(format!(
                        "shard {shard} index is not strictly sorted"
                    )));
                }
                let block_len = manifest
                    .blocks
                    .get(block as usize)
                    .map(|b| b.byte_length)
                    .ok_or_else(|| {
                        CubeError::VerificationFailed(format!("index references missing block {block}"))
                    })?;
                if offset + value_len as u64 > block_len {
                    return Err(CubeError::VerificationFailed(format!(
                        "value at block {block} offset {offset} overruns the block"
                    )));
                }
                index.signatures.push(sig);
                index.locations.push((block, offset));
            }
            shards.push(index);
        }

        Ok(Self {
            manifest,
            dir: dir.to_path_buf(),
            shards,
            blocks,
            value_len,
        })
    }

    pub fn manifest(&self) -> &CubeManifest {
        &self.manifest
    }

    pub fn generation(&self) -> u64 {
        self.manifest.generation
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim as usize
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key_count(&self) -> usize {
        self.shards.iter().map(|s| s.signatures.len()).sum()
    }

    /// All signatures, shard by shard, each shard in ascending order.
    pub fn signatures(&self) -> impl Iterator<Item = FeatureSignature> + '_ {
        self.shards
            .iter()
            .flat_map(|s| s.signatures.iter().map(|&v| FeatureSignature(v)))
    }

    fn locate(&self, key: FeatureSignature) -> Option<(u32, u64)> {
        let shard = &self.shards[(key.0 % u64::from(self.manifest.shard_count)) as usize];
        shard
            .signatures
            .binary_search(&key.0)
            .ok()
            .map(|i| shard.locations[i])
    }

    fn read_value(&self, block: u32, offset: u64) -> Result<SparseParameter, CubeError> {
        let dim = self.embedding_dim();
        let corrupt = |reason: String| CubeError::CorruptBlock { block, reason };
        let decoded = match &self.blocks[block as usize] {
            Block::Memory(bytes) => {
                let start = offset as usize;
                let slice = bytes
                    .get(start..start + self.value_len)
                    .ok_or_else(|| corrupt(format!("offset {offset} out of range")))?;
                SparseParameter::decode(slice, dim)
            }
            Block::Disk { file, len } => {
                if offset + self.value_len as u64 > *len {
                    return Err(corrupt(format!("offset {offset} out of range")));
                }
                let mut buf = vec![0u8; self.value_len];
                file.read_exact_at(&mut buf, offset)
                    .map_err(|e| corrupt(format!("read failed: {e}")))?;
                SparseParameter::decode(&buf, dim)
            }
        };
        decoded.ok_or_else(|| corrupt(format!("undecodable value at offset {offset}")))
    }

    /// Look up one key; `Ok(None)` when the key is not in the cube.
    pub fn get(&self, key: FeatureSignature) -> Result<Option<SparseParameter>, CubeError> {
        match self.locate(key) {
            Some((block, offset)) => self.read_value(block, offset).map(Some),
            None => Ok(None),
        }
    }

    /// Batched lookup preserving input order.
    pub fn lookup(&self, keys: &[FeatureSignature]) -> Result<Vec<Option<SparseParameter>>, CubeError> {
        keys.iter().map(|&k| self.get(k)).collect()
    }
}
