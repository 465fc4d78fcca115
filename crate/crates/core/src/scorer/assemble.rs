use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScorerError;
use crate::cube::{sign_str, FeatureSignature};

/// Raw sparse features keyed by feature-group name.
pub type FeatureGroups = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGroup {
    pub group: String,
    #[serde(default)]
    pub combiner: Combiner,
}

/// Ordered feature groups feeding a dense model; slot `i` occupies
/// `embedding_dim` consecutive inputs starting at `i * embedding_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSlotSpec {
    pub slots: Vec<SlotGroup>,
}

impl FeatureSlotSpec {
    pub fn new<I, S>(groups: I, combiner: Combiner) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            slots: groups
                .into_iter()
                .map(|g| SlotGroup {
                    group: g.into(),
                    combiner,
                })
                .collect(),
        }
    }

    pub fn input_dim(&self, embedding_dim: usize) -> usize {
        self.slots.len() * embedding_dim
    }

    pub fn contains(&self, group: &str) -> bool {
        self.slots.iter().any(|s| s.group == group)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.group.as_str())
    }
}

/// Build the dense input for one user-item pair.
///
/// Each slot combines the embeddings of its group's features; a feature the
/// cube does not know contributes the zero vector, and so does an empty or
/// absent group. A group present in the request but not in `slots` is an
/// error.
pub fn assemble<'a, F>(
    features: &FeatureGroups,
    slots: &FeatureSlotSpec,
    embedding_dim: usize,
    params: F,
) -> Result<Vec<f32>, ScorerError>
where
    F: Fn(FeatureSignature) -> Option<&'a [f32]>,
{
    if let Some(unknown) = features.keys().find(|g| !slots.contains(g)) {
        return Err(ScorerError::UnknownGroup(unknown.clone()));
    }
    let signed: BTreeMap<&str, Vec<FeatureSignature>> = features
        .iter()
        .map(|(g, raw)| (g.as_str(), raw.iter().map(|f| sign_str(f)).collect()))
        .collect();
    assemble_signed(|g| signed.get(g).map(Vec::as_slice), slots, embedding_dim, params)
}

/// Same as [`assemble`] over already signed features. `group` returns the
/// signatures of a group; groups it does not know count as empty.
pub fn assemble_signed<'a, 'g, G, F>(
    group: G,
    slots: &FeatureSlotSpec,
    embedding_dim: usize,
    params: F,
) -> Result<Vec<f32>, ScorerError>
where
    G: Fn(&str) -> Option<&'g [FeatureSignature]>,
    F: Fn(FeatureSignature) -> Option<&'a [f32]>,
{
    let mut out = vec![0.0f32; slots.input_dim(embedding_dim)];
    for (slot, chunk) in slots.slots.iter().zip(out.chunks_exact_mut(embedding_dim)) {
        let Some(sigs) = group(&slot.group) else {
            continue;
        };
        for &sig in sigs {
            if let Some(emb) = params(sig) {
                if emb.len() != embedding_dim {
                    return Err(ScorerError::DimensionMismatch {
                        expected: embedding_dim,
                        found: emb.len(),
                    });
                }
                for (o, e) in chunk.iter_mut().zip(emb) {
                    *o += e;
                }
            }
        }
        if slot.combiner == Combiner::Mean && sigs.len() > 1 {
            let n = sigs.len() as f32;
            chunk.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(out)
}
