use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::LfuCache;
use crate::cube::{CubeError, CubeSnapshot, FeatureSignature, SparseParameter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CubeCacheConfig {
    /// Memory level capacity as a fraction of the cube's key count.
    pub mem_ratio: f64,
    /// Disk level capacity as a fraction of the cube's key count.
    pub disk_ratio: f64,
    /// Counters halve every `aging_factor * capacity` operations per level.
    pub aging_factor: u64,
    /// Directory for the disk-level cache file; the system temp dir if unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for CubeCacheConfig {
    fn default() -> Self {
        Self {
            mem_ratio: 0.001,
            disk_ratio: 0.01,
            aging_factor: 10,
            cache_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CubeCacheError {
    #[error("cache built for generation {cache} used with cube generation {cube}")]
    GenerationMismatch { cache: u64, cube: u64 },
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error("cache file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Monotone hit/miss counters. One instance can be shared by the caches of
/// successive generations so totals survive hot reloads.
#[derive(Debug, Default)]
pub struct CacheCounters {
    pub lookups: AtomicU64,
    pub memory_hits: AtomicU64,
    pub disk_hits: AtomicU64,
    pub backing_fetches: AtomicU64,
}

impl CacheCounters {
    pub fn hit_ratio(&self) -> f64 {
        let lookups = self.lookups.load(Ordering::Relaxed);
        if lookups == 0 {
            return 0.0;
        }
        let hits = self.memory_hits.load(Ordering::Relaxed) + self.disk_hits.load(Ordering::Relaxed);
        hits as f64 / lookups as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitLevel {
    Memory,
    Disk,
    Backing,
}

/// Result of one batched [`CubeCache::get`].
#[derive(Debug, Default)]
pub struct CubeGet {
    pub values: Vec<Option<SparseParameter>>,
    pub memory_hits: usize,
    pub disk_hits: usize,
    pub backing_fetches: usize,
}

#[derive(Debug)]
struct Levels {
    memory: LfuCache<FeatureSignature, SparseParameter>,
    disk: LfuCache<FeatureSignature, u64>,
    file: File,
    free_slots: Vec<u64>,
    next_slot: u64,
}

/// Two-level LFU cache in front of a cube snapshot.
///
/// Lookups try the memory level, then the disk level (whose values live in a
/// local cache file), then the backing cube. Keys fetched from the cube enter
/// the disk level; a key moves into the memory level once its disk-level
/// frequency beats the coldest memory resident.
#[derive(Debug)]
pub struct CubeCache {
    generation: u64,
    dim: usize,
    levels: Mutex<Levels>,
    counters: Arc<CacheCounters>,
    path: PathBuf,
}

static CACHE_FILE_SEQ: AtomicU64 = AtomicU64::new(0);

fn capacity(ratio: f64, keys: usize) -> usize {
    if ratio <= 0.0 {
        0
    } else {
        ((ratio * keys as f64).round() as usize).max(1)
    }
}

impl CubeCache {
    pub fn new(config: &CubeCacheConfig, cube: &CubeSnapshot) -> Result<Self, CubeCacheError> {
        Self::with_counters(config, cube, Arc::new(CacheCounters::default()))
    }

    pub fn with_counters(
        config: &CubeCacheConfig,
        cube: &CubeSnapshot,
        counters: Arc<CacheCounters>,
    ) -> Result<Self, CubeCacheError> {
        let keys = cube.key_count();
        let mem_cap = capacity(config.mem_ratio, keys);
        let disk_cap = capacity(config.disk_ratio, keys);
        let dir = config.cache_dir.clone().unwrap_or_else(std::env::temp_dir);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!(
            "cube-cache-{}-{}-{}.bin",
            std::process::id(),
            cube.generation(),
            CACHE_FILE_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        let aging = config.aging_factor;
        Ok(Self {
            generation: cube.generation(),
            dim: cube.embedding_dim(),
            levels: Mutex::new(Levels {
                memory: LfuCache::with_aging(mem_cap, aging.saturating_mul(mem_cap as u64)),
                disk: LfuCache::with_aging(disk_cap, aging.saturating_mul(disk_cap as u64)),
                file,
                free_slots: Vec::new(),
                next_slot: 0,
            }),
            counters,
            path,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn counters(&self) -> &Arc<CacheCounters> {
        &self.counters
    }

    pub fn capacities(&self) -> (usize, usize) {
        let l = self.levels.lock();
        (l.memory.capacity(), l.disk.capacity())
    }

    /// Keys resident in (memory, disk) levels.
    pub fn resident(&self) -> (Vec<FeatureSignature>, Vec<FeatureSignature>) {
        let l = self.levels.lock();
        (l.memory.keys().copied().collect(), l.disk.keys().copied().collect())
    }

    pub fn get(&self, backing: &CubeSnapshot, keys: &[FeatureSignature]) -> Result<CubeGet, CubeCacheError> {
        if backing.generation() != self.generation {
            return Err(CubeCacheError::GenerationMismatch {
                cache: self.generation,
                cube: backing.generation(),
            });
        }
        let value_len = SparseParameter::encoded_len(self.dim);
        let mut out = CubeGet {
            values: Vec::with_capacity(keys.len()),
            ..CubeGet::default()
        };
        let mut levels = self.levels.lock();
        let lv = &mut *levels;
        for &key in keys {
            if let Some(v) = lv.memory.touch(&key) {
                out.values.push(Some(v.clone()));
                out.memory_hits += 1;
                continue;
            }
            if let Some(&slot) = lv.disk.touch(&key) {
                let mut buf = vec![0u8; value_len];
                lv.file.read_exact_at(&mut buf, slot * value_len as u64)?;
                let value = SparseParameter::decode(&buf, self.dim).ok_or_else(|| {
                    CubeCacheError::Io(std::io::Error::other("undecodable cache slot"))
                })?;
                let freq = lv.disk.frequency(&key).unwrap_or(1);
                let qualifies = !lv.memory.is_full()
                    || lv.memory.min_frequency().is_some_and(|min| freq > min);
                if qualifies && lv.memory.capacity() > 0 {
                    lv.memory.insert_with_frequency(key, value.clone(), freq);
                }
                out.values.push(Some(value));
                out.disk_hits += 1;
                continue;
            }
            out.backing_fetches += 1;
            let fetched = backing.get(key)?;
            if let Some(value) = &fetched {
                if lv.disk.capacity() > 0 {
                    let slot = lv.free_slots.pop().unwrap_or_else(|| {
                        lv.next_slot += 1;
                        lv.next_slot - 1
                    });
                    let mut bytes = Vec::with_capacity(value_len);
                    value.encode_into(&mut bytes);
                    lv.file.write_all_at(&bytes, slot * value_len as u64)?;
                    if let Some((_, freed)) = lv.disk.insert(key, slot) {
                        lv.free_slots.push(freed);
                    }
                }
                if !lv.memory.is_full() && lv.memory.capacity() > 0 {
                    lv.memory.insert(key, value.clone());
                }
            }
            out.values.push(fetched);
        }
        // Counters move under the same lock as the levels they describe.
        let c = &self.counters;
        c.lookups.fetch_add(keys.len() as u64, Ordering::Relaxed);
        c.memory_hits.fetch_add(out.memory_hits as u64, Ordering::Relaxed);
        c.disk_hits.fetch_add(out.disk_hits as u64, Ordering::Relaxed);
        c.backing_fetches.fetch_add(out.backing_fetches as u64, Ordering::Relaxed);
        drop(levels);
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for CubeCache {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
