use std::collections::BTreeMap;

use super::{Event, PipelineError};
use crate::cube::fnv1a64;

/// FNV-1a over the little-endian bytes, then a splitmix64 finaliser so
/// consecutive ids spread across the unit interval.
pub fn stable_hash64(value: u64) -> u64 {
    let mut z = fnv1a64(&value.to_le_bytes());
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tenant weights plus the entry processor of each tenant branch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TenantSplit {
    pub weights: BTreeMap<String, f64>,
    pub entries: BTreeMap<String, String>,
}

impl TenantSplit {
    pub fn new(weights: BTreeMap<String, f64>, entries: BTreeMap<String, String>) -> Self {
        Self { weights, entries }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (tenant, w) in &self.weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(PipelineError::InvalidConfig(format!(
                    "tenant {tenant:?} has invalid weight {w}"
                )));
            }
            if !self.entries.contains_key(tenant) {
                return Err(PipelineError::InvalidConfig(format!(
                    "tenant {tenant:?} has no entry processor"
                )));
            }
        }
        Ok(())
    }
}

/// Picks a tenant for `request_id` by walking cumulative weights with a
/// point derived from a stable hash of the id.
pub fn choose_tenant(request_id: u64, weights: &BTreeMap<String, f64>) -> Result<&str, PipelineError> {
    let total: f64 = weights.values().filter(|w| **w > 0.0).sum();
    if weights.is_empty() || total <= 0.0 || !total.is_finite() {
        return Err(PipelineError::NoTenants);
    }
    let u = (stable_hash64(request_id) >> 11) as f64 / (1u64 << 53) as f64;
    let target = u * total;
    let mut acc = 0.0;
    let mut last = None;
    for (name, w) in weights {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(name.as_str());
        if target < acc {
            return Ok(name);
        }
    }
    Ok(last.expect("at least one positive weight"))
}

/// Tags the event with its tenant and returns the branch entry id. A tenant
/// already set on the event is kept when it names a known branch.
pub fn dispatch_tenant<P>(
    mut event: Event<P>,
    split: &TenantSplit,
) -> Result<(Event<P>, String), PipelineError> {
    if let Some(t) = &event.tenant {
        if let Some(entry) = split.entries.get(t) {
            let entry = entry.clone();
            return Ok((event, entry));
        }
    }
    let tenant = choose_tenant(event.request_id, &split.weights)?.to_string();
    let entry = split
        .entries
        .get(&tenant)
        .cloned()
        .ok_or_else(|| PipelineError::InvalidConfig(format!("tenant {tenant:?} has no entry")))?;
    event.tenant = Some(tenant);
    Ok((event, entry))
}
