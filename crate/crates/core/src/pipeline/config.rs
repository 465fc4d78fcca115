use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> usize {
    1
}

/// Declarative pipeline description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub processors: Vec<ProcessorConfig>,
    #[serde(default)]
    pub edges: Vec<EdgeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenants: Option<TenantConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorConfig {
    pub id: String,
    pub kind: String,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Defaults to `max(64, 4 * batch_size)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_capacity: Option<usize>,
    /// Join staleness timeout; only read by `join` processors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub settings: serde_json::Value,
}

impl ProcessorConfig {
    pub fn new(id: impl Into<String>, kind: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: kind.into(),
            batch_size: 1,
            parallelism: 1,
            channel_capacity: None,
            join_timeout_ms: None,
            settings: serde_json::Value::Null,
        }
    }

    pub fn batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn parallel(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn capacity(mut self, capacity: usize) -> Self {
        self.channel_capacity = Some(capacity);
        self
    }

    pub fn with_settings(mut self, settings: serde_json::Value) -> Self {
        self.settings = settings;
        self
    }

    pub fn effective_capacity(&self) -> usize {
        self.channel_capacity
            .unwrap_or_else(|| (4 * self.batch_size).max(64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub from: String,
    pub to: String,
}

/// Multi-tenant routing: a `dispatch` processor sends each request to the
/// entry processor of one tenant branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantConfig {
    /// Relative traffic weight per tenant.
    pub split: BTreeMap<String, f64>,
    /// Entry processor id per tenant.
    pub entries: BTreeMap<String, String>,
}

impl PipelineConfig {
    pub fn new(processors: Vec<ProcessorConfig>, edges: &[(&str, &str)]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            processors,
            edges: edges
                .iter()
                .map(|(f, t)| EdgeConfig {
                    from: (*f).into(),
                    to: (*t).into(),
                })
                .collect(),
            tenants: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| PipelineError::InvalidConfig(format!("unparseable pipeline config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn processor(&self, id: &str) -> Option<&ProcessorConfig> {
        self.processors.iter().find(|p| p.id == id)
    }

    pub fn processor_mut(&mut self, id: &str) -> Option<&mut ProcessorConfig> {
        self.processors.iter_mut().find(|p| p.id == id)
    }
}
