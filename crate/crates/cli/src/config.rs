use std::path::{Path, PathBuf};

use rankserve_core::cache::CubeCacheConfig;
use rankserve_core::pipeline::{PipelineConfig, TenantConfig};
use rankserve_core::serving::{reference_pipeline, AllocatorKnobs, QueryCacheSettings, SheddingSettings, StackConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LISTEN_ENV: &str = "RANKSERVE_LISTEN";
pub const MODEL_ROOT_ENV: &str = "RANKSERVE_MODEL_ROOT";

/// Service configuration file (JSON). Every field is optional; missing
/// fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Pipeline description; the reference pipeline when unset.
    pub pipeline_path: Option<PathBuf>,
    /// Directory of numbered generation directories.
    pub model_root: PathBuf,
    pub cube_cache: CubeCacheConfig,
    pub query_cache: QueryCacheSettings,
    pub shedding: SheddingSettings,
    /// Replaces the pipeline's tenant table when set.
    pub tenants: Option<TenantConfig>,
    pub allocator: AllocatorKnobs,
    pub poll_interval_ms: u64,
    /// Overlay written by `tune`, applied last.
    pub overlay_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let stack = StackConfig::default();
        Self {
            listen: "127.0.0.1:8080".into(),
            pipeline_path: None,
            model_root: PathBuf::from("models"),
            cube_cache: stack.cube_cache,
            query_cache: stack.query_cache,
            shedding: stack.shedding,
            tenants: None,
            allocator: stack.allocator,
            poll_interval_ms: stack.poll_interval_ms,
            overlay_path: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies explicit overrides, typically from flags or the environment.
    pub fn override_with(&mut self, listen: Option<String>, model_root: Option<PathBuf>) {
        if let Some(l) = listen {
            self.listen = l;
        }
        if let Some(r) = model_root {
            self.model_root = r;
        }
    }

    /// The stack configuration this service runs.
    pub fn stack_config(&self) -> Result<StackConfig, CliError> {
        let mut pipeline = match &self.pipeline_path {
            Some(p) => PipelineConfig::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => reference_pipeline(),
        };
        if self.tenants.is_some() {
            pipeline.tenants = self.tenants.clone();
        }
        let mut stack = StackConfig {
            pipeline,
            cube_cache: self.cube_cache.clone(),
            query_cache: self.query_cache.clone(),
            shedding: self.shedding.clone(),
            allocator: self.allocator.clone(),
            poll_interval_ms: self.poll_interval_ms,
        };
        if let Some(p) = &self.overlay_path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let overlay: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            stack.apply_overlay(&overlay).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(stack)
    }

    /// Checks paths and value ranges. Returns the stack configuration.
    pub fn validate(&self) -> Result<StackConfig, CliError> {
        if !self.model_root.is_dir() {
            return Err(CliError::Config(format!("model root {} is not a directory", self.model_root.display())));
        }
        if let Some(p) = &self.pipeline_path {
            if !p.is_file() {
                return Err(CliError::Config(format!("pipeline config {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.shedding.model_path {
            if self.shedding.enabled && !p.is_file() {
                return Err(CliError::Config(format!("shedding model {} does not exist", p.display())));
            }
        }
        if self.poll_interval_ms == 0 {
            return Err(CliError::Config("poll_interval_ms must be positive".into()));
        }
        let o = &self.shedding.overload;
        if !(o.capacity_fraction > 0.0 && o.capacity_fraction <= 1.0) {
            return Err(CliError::Config("shedding capacity_fraction must lie in (0, 1]".into()));
        }
        let stack = self.stack_config()?;
        stack.validate().map_err(|e| CliError::Config(e.to_string()))?;
        stack.validate_ranges().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(stack)
    }
}
