//! Request and response types that flow through the serving stack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::StageTiming;
use crate::scorer::FeatureGroups;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub item: u64,
    /// Estimated score from the upstream recall phase.
    pub escore: f32,
    #[serde(default)]
    pub features: FeatureGroups,
}

/// A user context plus the candidate list to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
    pub user: u64,
    #[serde(default)]
    pub user_features: FeatureGroups,
    pub candidates: Vec<CandidateItem>,
}

impl InferenceRequest {
    /// Number of raw sparse features the request references.
    pub fn feature_count(&self) -> usize {
        let user: usize = self.user_features.values().map(Vec::len).sum();
        let items: usize = self
            .candidates
            .iter()
            .flat_map(|c| c.features.values())
            .map(Vec::len)
            .sum();
        user + items
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: u64,
    pub score: f32,
    pub cache_hit: bool,
    /// Per-head scores when several dense heads scored the item.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub heads: BTreeMap<String, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShedItem {
    pub item: u64,
    pub escore: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
    pub generation: u64,
    pub items: Vec<ScoredItem>,
    /// Candidates removed by load shedding before scoring.
    #[serde(default)]
    pub shed: Vec<ShedItem>,
    #[serde(default)]
    pub trace: Vec<StageTiming>,
}

impl ScoreResponse {
    pub fn cache_hits(&self) -> usize {
        self.items.iter().filter(|i| i.cache_hit).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub user: u64,
    pub kind: String,
    pub ts: f64,
}
