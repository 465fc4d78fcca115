use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::level_at;
use super::{TraceRecord, WorkloadError, WorkloadSpec, ZipfTable};
use crate::request::{CandidateItem, FeedbackEvent, InferenceRequest};
use crate::scorer::FeatureGroups;

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

struct Draw<'a> {
    spec: &'a WorkloadSpec,
    zipf: ZipfTable,
}

impl Draw<'_> {
    fn groups(&self, names: &[String], rng: &mut ChaCha8Rng) -> FeatureGroups {
        names
            .iter()
            .map(|g| {
                let feats = (0..self.spec.features_per_group)
                    .map(|_| format!("k{}", self.zipf.sample(rng)))
                    .collect();
                (g.clone(), feats)
            })
            .collect()
    }

    fn request(&self, rng: &mut ChaCha8Rng) -> InferenceRequest {
        let user = rng.random_range(0..self.spec.user_count);
        let user_features = self.groups(&self.spec.user_groups, rng);
        let candidates = (0..self.spec.candidates_per_request)
            .map(|_| CandidateItem {
                item: rng.random_range(0..self.spec.item_count),
                escore: (rng.random::<f32>() * 1e4).round() / 1e4,
                features: self.groups(&self.spec.item_groups, rng),
            })
            .collect();
        InferenceRequest {
            request_id: 0,
            tenant: None,
            user,
            user_features,
            candidates,
        }
    }
}

/// Builds a deterministic trace for `spec`.
///
/// Fresh requests arrive as an inhomogeneous Poisson process (thinning) at
/// `base_rate * (1 - recurrence_prob)` times the profile level. Each issued
/// request, fresh or repeated, is repeated with probability
/// `recurrence_prob` after a uniform delay inside the recurrence window, so
/// the long-run request rate is `base_rate`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = Draw {
        spec,
        zipf: ZipfTable::new(spec.key_universe, spec.zipf_exponent),
    };
    let profile = spec.normalized_profile();
    let cycle = spec.cycle_length();
    let peak = profile.iter().cloned().fold(0.0, f64::max);
    let fresh_rate = spec.base_rate * (1.0 - spec.recurrence_prob);
    let lambda_max = fresh_rate * peak;

    let mut bodies: Vec<InferenceRequest> = Vec::new();
    // (timestamp, body index, issue order)
    let mut issues: Vec<(f64, usize, usize)> = Vec::new();
    let window = spec.recurrence_window_s;
    if lambda_max > 0.0 {
        let mut t = 0.0;
        loop {
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / lambda_max;
            if t >= spec.duration_s {
                break;
            }
            let accept: f64 = rng.random();
            if accept * peak >= level_at(&profile, cycle, t) {
                continue;
            }
            let body = bodies.len();
            bodies.push(draw.request(&mut rng));
            let ts = round_us(t);
            issues.push((ts, body, issues.len()));
            let mut last = ts;
            while rng.random::<f64>() < spec.recurrence_prob {
                let delay = (rng.random::<f64>() * window).min(window - 1e-6);
                let next = round_us(last + delay);
                if next >= spec.duration_s {
                    break;
                }
                issues.push((next, body, issues.len()));
                last = next;
            }
        }
    }
    issues.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));

    let mut feedback: BTreeMap<usize, Vec<FeedbackEvent>> = BTreeMap::new();
    if spec.feedback_prob > 0.0 {
        for &(ts, body, _) in &issues {
            if rng.random::<f64>() >= spec.feedback_prob {
                continue;
            }
            let at = round_us(ts + rng.random::<f64>() * spec.feedback_delay_s);
            let idx = issues.partition_point(|(t, _, _)| *t < at);
            if idx < issues.len() {
                feedback.entry(idx).or_default().push(FeedbackEvent {
                    user: bodies[body].user,
                    kind: "click".into(),
                    ts: issues[idx].0,
                });
            }
        }
    }

    Ok(issues
        .iter()
        .enumerate()
        .map(|(i, &(ts, body, _))| {
            let mut request = bodies[body].clone();
            request.request_id = i as u64;
            TraceRecord {
                ts,
                request,
                feedback: feedback.remove(&i).unwrap_or_default(),
            }
        })
        .collect())
}
