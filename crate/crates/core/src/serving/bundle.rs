use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ServingError;
use crate::cache::{CacheCounters, CubeCache, CubeCacheConfig};
use crate::cube::{self, BuildOptions, CubeManifest, CubeSnapshot, Generational, SparseParameter};
use crate::scorer::{DenseModel, FeatureSlotSpec};

pub const HEADS_FILE: &str = "heads.json";
pub const DENSE_FILE: &str = "dense.bin";

/// One dense head as listed in `heads.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub file: String,
    pub slots: FeatureSlotSpec,
}

#[derive(Debug)]
pub struct Head {
    pub name: String,
    pub model: DenseModel,
    pub slots: FeatureSlotSpec,
}

/// Everything served under one generation: the cube, its cache, and the
/// dense heads. Requests bind to one bundle at submission.
#[derive(Debug)]
pub struct ModelBundle {
    pub generation: u64,
    pub dir: PathBuf,
    pub cube: CubeSnapshot,
    pub cache: CubeCache,
    pub heads: Vec<Head>,
    /// Feature groups read by at least one active head.
    pub groups: BTreeSet<String>,
}

impl Generational for ModelBundle {
    fn generation(&self) -> u64 {
        self.generation
    }
}

impl ModelBundle {
    /// Loads and verifies a generation directory. `active` names the heads
    /// the stack will run; empty means the first head.
    pub fn load(
        dir: &Path,
        cache: &CubeCacheConfig,
        counters: Arc<CacheCounters>,
        active: &[String],
    ) -> Result<Self, ServingError> {
        let fail = |m: String| ServingError::ModelLoad(format!("{}: {m}", dir.display()));
        let cube = CubeSnapshot::load(dir).map_err(|e| fail(e.to_string()))?;
        let generation = cube.generation();
        let specs: Vec<HeadSpec> = serde_json::from_str(
            &fs::read_to_string(dir.join(HEADS_FILE)).map_err(|e| fail(format!("{HEADS_FILE}: {e}")))?,
        )
        .map_err(|e| fail(format!("{HEADS_FILE}: {e}")))?;
        if specs.is_empty() {
            return Err(fail("no dense heads".into()));
        }
        let mut heads = Vec::with_capacity(specs.len());
        for s in specs {
            let model = DenseModel::load(&dir.join(&s.file)).map_err(|e| fail(format!("{}: {e}", s.file)))?;
            if model.generation != generation {
                return Err(fail(format!(
                    "head {} has generation {}, cube has {generation}",
                    s.name, model.generation
                )));
            }
            let want = s.slots.input_dim(cube.embedding_dim());
            if model.input_dim != want {
                return Err(fail(format!(
                    "head {} expects {} inputs, its slots give {want}",
                    s.name, model.input_dim
                )));
            }
            heads.push(Head {
                name: s.name,
                model,
                slots: s.slots,
            });
        }
        let mut groups = BTreeSet::new();
        for name in active_names(&heads, active).map_err(fail)? {
            let h = heads.iter().find(|h| h.name == name).unwrap();
            groups.extend(h.slots.group_names().map(str::to_string));
        }
        let cache = CubeCache::with_counters(cache, &cube, counters).map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            generation,
            dir: dir.to_path_buf(),
            cube,
            cache,
            heads,
            groups,
        })
    }

    pub fn head(&self, name: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.name == name)
    }
}

fn active_names(heads: &[Head], active: &[String]) -> Result<Vec<String>, String> {
    if active.is_empty() {
        return Ok(vec![heads[0].name.clone()]);
    }
    for a in active {
        if !heads.iter().any(|h| &h.name == a) {
            return Err(format!("no head named {a:?}"));
        }
    }
    Ok(active.to_vec())
}

/// Writes a complete generation directory: dense heads first, then the cube,
/// whose `DONE` sentinel goes last. The first head is stored as `dense.bin`.
pub fn write_bundle<I, K>(
    dir: &Path,
    generation: u64,
    pairs: I,
    heads: &[(String, DenseModel, FeatureSlotSpec)],
    options: &BuildOptions,
) -> Result<CubeManifest, ServingError>
where
    I: IntoIterator<Item = (K, SparseParameter)>,
    K: AsRef<[u8]>,
{
    if heads.is_empty() {
        return Err(ServingError::Config("a bundle needs at least one head".into()));
    }
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(cube::DONE_FILE));
    let mut specs = Vec::new();
    for (i, (name, model, slots)) in heads.iter().enumerate() {
        if model.generation != generation {
            return Err(ServingError::Config(format!(
                "head {name} has generation {}, bundle is {generation}",
                model.generation
            )));
        }
        let file = if i == 0 { DENSE_FILE.to_string() } else { format!("dense_{name}.bin") };
        model
            .save(&dir.join(&file))
            .map_err(|e| ServingError::ModelLoad(e.to_string()))?;
        specs.push(HeadSpec {
            name: name.clone(),
            file,
            slots: slots.clone(),
        });
    }
    fs::write(dir.join(HEADS_FILE), serde_json::to_vec_pretty(&specs)?)?;
    let opts = BuildOptions {
        generation,
        ..options.clone()
    };
    Ok(cube::build(pairs, &opts, dir)?)
}

/// Conventional directory name for a generation under a model root.
pub fn generation_dir(root: &Path, generation: u64) -> PathBuf {
    root.join(format!("gen_{generation:06}"))
}
