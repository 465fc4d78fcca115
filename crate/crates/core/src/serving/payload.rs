use std::collections::HashMap;
use std::sync::Arc;

use super::ModelBundle;
use crate::cube::FeatureSignature;
use crate::pipeline::Payload;
use crate::request::{InferenceRequest, ScoredItem, ShedItem};

/// Signatures per feature group, in group-name order.
pub type SignedGroups = Vec<(String, Vec<FeatureSignature>)>;

pub(crate) fn group_of<'a>(groups: &'a SignedGroups, name: &str) -> Option<&'a [FeatureSignature]> {
    groups.iter().find(|(g, _)| g == name).map(|(_, s)| s.as_slice())
}

#[derive(Debug, Clone)]
pub struct ItemState {
    /// Position in the request's candidate list.
    pub index: usize,
    pub item: u64,
    pub escore: f32,
    pub groups: SignedGroups,
}

/// Per-request state carried through the serving pipeline. Fragments of one
/// request are merged field by field: the first fragment that filled an
/// optional field wins, lists are concatenated.
#[derive(Debug, Clone, Default)]
pub struct RankPayload {
    pub bundle: Option<Arc<ModelBundle>>,
    pub request: Option<Arc<InferenceRequest>>,
    /// Stack clock at submission, seconds. Drives cache expiry and the
    /// overload meter.
    pub now: f64,
    pub user: Option<SignedGroups>,
    /// Candidates still to be scored, sorted by estimated score once the
    /// item processor has run.
    pub items: Option<Vec<ItemState>>,
    pub scored: Vec<(usize, ScoredItem)>,
    pub shed: Vec<ShedItem>,
    pub params: Option<Arc<HashMap<FeatureSignature, Vec<f32>>>>,
}

impl RankPayload {
    pub fn new(bundle: Arc<ModelBundle>, request: Arc<InferenceRequest>, now: f64) -> Self {
        Self {
            bundle: Some(bundle),
            request: Some(request),
            now,
            ..Default::default()
        }
    }

    pub fn generation(&self) -> u64 {
        self.bundle.as_ref().map_or(0, |b| b.generation)
    }
}

impl Payload for RankPayload {
    fn merge(fragments: Vec<Self>) -> Self {
        let mut it = fragments.into_iter();
        let mut out = it.next().unwrap_or_default();
        for f in it {
            out.bundle = out.bundle.or(f.bundle);
            out.request = out.request.or(f.request);
            out.user = out.user.or(f.user);
            out.items = out.items.or(f.items);
            out.params = out.params.or(f.params);
            out.scored.extend(f.scored);
            out.shed.extend(f.shed);
        }
        out
    }
}
