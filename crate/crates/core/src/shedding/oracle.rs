use serde::{Deserialize, Serialize};

use super::SheddingFeatures;
use crate::request::CandidateItem;

/// Stable descending sort by estimated score.
pub fn sort_candidates(mut candidates: Vec<CandidateItem>) -> Vec<CandidateItem> {
    candidates.sort_by(|a, b| b.escore.total_cmp(&a.escore));
    candidates
}

/// Indices of the `n` highest scores; ties go to the lower index.
fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Overlap of two slates divided by the slate size `n`.
pub fn recall_at(n: usize, reference: &[usize], pruned: &[usize]) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let hits = pruned.iter().filter(|i| reference.contains(i)).count();
    hits as f64 / n as f64
}

/// Minimal keep count `k >= n_slate` such that scoring only the first `k`
/// candidates loses at most `epsilon` recall@N against scoring all of them.
///
/// `final_scores[i]` is the full re-ranking score of the i-th candidate in
/// estimated-score order. Because the global top-N members inside a prefix
/// always make that prefix's top-N, recall at `k` is the count of global
/// top-N indices below `k`, which grows with `k`; one pass finds the answer.
pub fn oracle_cutoff_scores(final_scores: &[f64], n_slate: usize, epsilon: f64) -> usize {
    let n = final_scores.len();
    if n_slate >= n {
        return n;
    }
    if n_slate == 0 {
        return 0;
    }
    let mut in_top = vec![false; n];
    for i in top_n(final_scores, n_slate) {
        in_top[i] = true;
    }
    let mut overlap = in_top[..n_slate].iter().filter(|b| **b).count();
    let tol = epsilon + 1e-12;
    for k in n_slate..=n {
        if 1.0 - overlap as f64 / n_slate as f64 <= tol {
            return k;
        }
        if k < n && in_top[k] {
            overlap += 1;
        }
    }
    n
}

/// [`oracle_cutoff_scores`] with the final scorer applied to each sorted
/// candidate.
pub fn oracle_cutoff<T>(sorted: &[T], final_scorer: impl Fn(&T) -> f64, n_slate: usize, epsilon: f64) -> usize {
    let scores: Vec<f64> = sorted.iter().map(final_scorer).collect();
    oracle_cutoff_scores(&scores, n_slate, epsilon)
}

/// Training example for the pruning regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShedLogRecord {
    pub features: SheddingFeatures,
    pub n: usize,
    pub k_star: usize,
    /// Recall@N lost when keeping `k_star`.
    pub quality_delta: f64,
}

impl ShedLogRecord {
    pub fn keep_fraction(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.k_star as f64 / self.n as f64
        }
    }

    /// Builds a record by running the oracle on one request.
    pub fn label(features: SheddingFeatures, final_scores: &[f64], n_slate: usize, epsilon: f64) -> Self {
        let n = final_scores.len();
        let k = oracle_cutoff_scores(final_scores, n_slate, epsilon).max(1.min(n));
        let reference = top_n(final_scores, n_slate.min(n));
        let pruned = top_n(&final_scores[..k], n_slate.min(k));
        Self {
            features,
            n,
            k_star: k,
            quality_delta: 1.0 - recall_at(n_slate.min(n), &reference, &pruned),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_final_scorer_keeps_slate() {
        assert_eq!(oracle_cutoff_scores(&[0.9, 0.8, 0.2, 0.1], 2, 0.0), 2);
    }

    #[test]
    fn inverted_bottom_pair_still_two() {
        assert_eq!(oracle_cutoff_scores(&[0.9, 0.8, 0.1, 0.2], 2, 0.0), 2);
    }

    #[test]
    fn vacuous_epsilon_gives_slate_size() {
        assert_eq!(oracle_cutoff_scores(&[0.1, 0.2, 0.3, 0.9], 2, 1.0), 2);
    }

    #[test]
    fn reversed_scores_need_everything() {
        assert_eq!(oracle_cutoff_scores(&[0.1, 0.2, 0.3, 0.9], 2, 0.0), 4);
        assert_eq!(oracle_cutoff_scores(&[0.1, 0.2, 0.3, 0.9], 2, 0.5), 3);
    }

    #[test]
    fn sort_is_stable_descending() {
        let c = |item, escore| CandidateItem {
            item,
            escore,
            features: Default::default(),
        };
        let out = sort_candidates(vec![c(1, 0.2), c(2, 0.9), c(3, 0.5)]);
        assert_eq!(out.iter().map(|c| c.item).collect::<Vec<_>>(), vec![2, 3, 1]);
        let out = sort_candidates(vec![c(1, 0.5), c(2, 0.5), c(3, 0.5)]);
        assert_eq!(out.iter().map(|c| c.item).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(sort_candidates(vec![]).is_empty());
    }
}
