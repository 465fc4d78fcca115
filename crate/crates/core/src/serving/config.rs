use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ServingError;
use crate::cache::CubeCacheConfig;
use crate::pipeline::{PipelineConfig, ProcessorConfig};
use crate::shedding::OverloadConfig;
use crate::tuning::{ParamValue, ParameterSpace, TuningPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryCacheSettings {
    pub enabled: bool,
    pub capacity: usize,
    pub expire_window_s: f64,
    pub admission_threshold: f32,
}

impl Default for QueryCacheSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: 200_000,
            expire_window_s: 120.0,
            admission_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SheddingSettings {
    pub enabled: bool,
    pub model_path: Option<PathBuf>,
    /// Final slate size; shedding never keeps fewer candidates.
    pub slate_size: usize,
    pub overload: OverloadConfig,
}

impl Default for SheddingSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            model_path: None,
            slate_size: 10,
            overload: OverloadConfig::default(),
        }
    }
}

/// Allocator knobs from the tuning space. They are carried through config
/// and reports but have no runtime effect here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocatorKnobs {
    pub arenas: i64,
    pub max_active_extent: i64,
    pub huge_page: String,
}

impl Default for AllocatorKnobs {
    fn default() -> Self {
        Self {
            arenas: 500,
            max_active_extent: 6,
            huge_page: "Default".into(),
        }
    }
}

/// Configuration of one serving stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub pipeline: PipelineConfig,
    pub cube_cache: CubeCacheConfig,
    pub query_cache: QueryCacheSettings,
    pub shedding: SheddingSettings,
    pub allocator: AllocatorKnobs,
    pub poll_interval_ms: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            pipeline: reference_pipeline(),
            cube_cache: CubeCacheConfig::default(),
            query_cache: QueryCacheSettings::default(),
            shedding: SheddingSettings::default(),
            allocator: AllocatorKnobs::default(),
            poll_interval_ms: 500,
        }
    }
}

/// Stage ids of the reference pipeline.
pub mod stages {
    pub const INGRESS: &str = "ingress";
    pub const USER: &str = "user";
    pub const ITEM_EXTRACT: &str = "item_extract";
    pub const ITEM_PROCESS: &str = "item_process";
    pub const JOIN: &str = "join";
    pub const SHED: &str = "shed";
    pub const QUERY_CACHE: &str = "query_cache";
    pub const CUBE: &str = "cube";
    pub const DNN: &str = "dnn";
}

/// User and item branches joined ahead of shedding, query cache, cube and
/// dense scoring. Batch sizes follow the tuning space defaults.
pub fn reference_pipeline() -> PipelineConfig {
    use stages::*;
    PipelineConfig::new(
        vec![
            ProcessorConfig::new(INGRESS, "identity"),
            ProcessorConfig::new(USER, "user_features")
                .batch(30)
                .with_settings(json!({"invocation_us": 40, "request_us": 30})),
            ProcessorConfig::new(ITEM_EXTRACT, "item_features")
                .batch(4)
                .with_settings(json!({"invocation_us": 40, "item_us": 4})),
            ProcessorConfig::new(ITEM_PROCESS, "item_process")
                .batch(6)
                .with_settings(json!({"invocation_us": 40, "item_us": 4})),
            ProcessorConfig::new(JOIN, "join").batch(16),
            ProcessorConfig::new(SHED, "shed").batch(16),
            ProcessorConfig::new(QUERY_CACHE, "query_cache").batch(16),
            ProcessorConfig::new(CUBE, "cube")
                .batch(10)
                .with_settings(json!({"invocation_us": 60, "fetch_us": 6})),
            ProcessorConfig::new(DNN, "dnn")
                .batch(15)
                .with_settings(json!({"invocation_us": 60})),
        ],
        &[
            (INGRESS, USER),
            (INGRESS, ITEM_EXTRACT),
            (ITEM_EXTRACT, ITEM_PROCESS),
            (USER, JOIN),
            (ITEM_PROCESS, JOIN),
            (JOIN, SHED),
            (SHED, QUERY_CACHE),
            (QUERY_CACHE, CUBE),
            (CUBE, DNN),
        ],
    )
}

impl StackConfig {
    pub fn load(path: &Path) -> Result<Self, ServingError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ServingError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ServingError> {
        let bad = |m: &str| Err(ServingError::Config(m.into()));
        let c = &self.cube_cache;
        if !(0.0..=1.0).contains(&c.mem_ratio) || !(0.0..=1.0).contains(&c.disk_ratio) {
            return bad("cube cache ratios must lie in [0, 1]");
        }
        let q = &self.query_cache;
        if q.enabled && (q.capacity == 0 || !(q.expire_window_s > 0.0)) {
            return bad("query cache needs positive capacity and expire window");
        }
        if self.shedding.enabled && self.shedding.slate_size == 0 {
            return bad("shedding slate size must be positive");
        }
        Ok(())
    }

    /// Checks the tunable values against the reference tuning space ranges.
    pub fn validate_ranges(&self) -> Result<(), ServingError> {
        let space = ParameterSpace::reference();
        space
            .validate(&self.tuning_point())
            .map_err(|e| ServingError::Config(e.to_string()))
    }

    /// Current values of the reference tuning space parameters.
    pub fn tuning_point(&self) -> TuningPoint {
        let space = ParameterSpace::reference();
        let mut p = space.defaults();
        for d in &space.parameters {
            if let Some(stage) = &d.stage {
                if let Some(proc_) = self.pipeline.processor(stage) {
                    p.set(&d.name, ParamValue::Int(proc_.batch_size as i64));
                }
            }
        }
        p.set("cube_cache_ratio_pct", ParamValue::Float(self.cube_cache.disk_ratio * 100.0));
        p.set("query_cache_window_s", ParamValue::Float(self.query_cache.expire_window_s));
        p.set("arenas", ParamValue::Int(self.allocator.arenas));
        p.set("max_active_extent", ParamValue::Int(self.allocator.max_active_extent));
        p.set("huge_page", ParamValue::Cat(self.allocator.huge_page.clone()));
        p
    }

    /// Applies a point from the reference tuning space. Stage-level batch
    /// parameters set the batch size of the processor named by their stage;
    /// the memory level keeps a tenth of the disk level ratio.
    pub fn apply_point(&mut self, point: &TuningPoint) -> Result<(), ServingError> {
        let space = ParameterSpace::reference();
        space.validate(point).map_err(|e| ServingError::Config(e.to_string()))?;
        for d in &space.parameters {
            if let Some(stage) = &d.stage {
                let b = point.i64(&d.name).unwrap() as usize;
                if let Some(p) = self.pipeline.processor_mut(stage) {
                    p.batch_size = b;
                }
            }
        }
        let ratio = point.f64("cube_cache_ratio_pct").unwrap() / 100.0;
        self.cube_cache.disk_ratio = ratio;
        self.cube_cache.mem_ratio = ratio / 10.0;
        self.query_cache.expire_window_s = point.f64("query_cache_window_s").unwrap();
        self.allocator.arenas = point.i64("arenas").unwrap();
        self.allocator.max_active_extent = point.i64("max_active_extent").unwrap();
        self.allocator.huge_page = point.str("huge_page").unwrap().to_string();
        Ok(())
    }

    /// The changes `apply_point` makes, as a JSON overlay.
    pub fn overlay_for(point: &TuningPoint) -> Value {
        let space = ParameterSpace::reference();
        let mut procs = serde_json::Map::new();
        for d in &space.parameters {
            if let (Some(stage), Some(b)) = (&d.stage, point.i64(&d.name)) {
                procs.insert(stage.clone(), json!({"batch_size": b}));
            }
        }
        let ratio = point.f64("cube_cache_ratio_pct").unwrap_or(1.0) / 100.0;
        json!({
            "processors": procs,
            "cube_cache": {"disk_ratio": ratio, "mem_ratio": ratio / 10.0},
            "query_cache": {"expire_window_s": point.f64("query_cache_window_s")},
            "allocator": {
                "arenas": point.i64("arenas"),
                "max_active_extent": point.i64("max_active_extent"),
                "huge_page": point.str("huge_page"),
            },
        })
    }

    /// Applies an overlay produced by [`overlay_for`](Self::overlay_for).
    pub fn apply_overlay(&mut self, overlay: &Value) -> Result<(), ServingError> {
        let bad = |m: String| ServingError::Config(format!("overlay: {m}"));
        if let Some(procs) = overlay.get("processors").and_then(Value::as_object) {
            for (id, v) in procs {
                let p = self
                    .pipeline
                    .processor_mut(id)
                    .ok_or_else(|| bad(format!("unknown processor {id:?}")))?;
                if let Some(b) = v.get("batch_size").and_then(Value::as_u64) {
                    p.batch_size = b as usize;
                }
            }
        }
        let mut me = serde_json::to_value(&*self).map_err(|e| bad(e.to_string()))?;
        for key in ["cube_cache", "query_cache", "allocator"] {
            if let Some(obj) = overlay.get(key).and_then(Value::as_object) {
                for (k, v) in obj {
                    if !v.is_null() {
                        me[key][k] = v.clone();
                    }
                }
            }
        }
        *self = serde_json::from_value(me).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }
}
