use serde::{Deserialize, Serialize};

use super::WorkloadError;

/// Hourly relative traffic with a late-morning peak, a larger evening peak
/// and a deep trough before dawn.
pub fn default_diurnal_profile() -> Vec<f64> {
    vec![
        0.55, 0.40, 0.30, 0.25, 0.22, 0.25, 0.40, 0.65, 0.90, 1.10, 1.25, 1.35, //
        1.30, 1.15, 1.05, 1.05, 1.10, 1.20, 1.40, 1.60, 1.70, 1.55, 1.15, 0.80,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    /// Distinct raw sparse features ("k0", "k1", ...).
    pub key_universe: usize,
    pub zipf_exponent: f64,
    pub user_count: u64,
    pub item_count: u64,
    pub candidates_per_request: usize,
    pub user_groups: Vec<String>,
    pub item_groups: Vec<String>,
    /// Raw features drawn per group per entity.
    pub features_per_group: usize,
    /// Probability that a request is issued again (same user, candidates and
    /// features) within `recurrence_window_s`.
    pub recurrence_prob: f64,
    pub recurrence_window_s: f64,
    /// Probability that a request is followed by a user feedback event.
    pub feedback_prob: f64,
    pub feedback_delay_s: f64,
    /// 24 hourly weights, rescaled to mean 1.
    pub diurnal_profile: Vec<f64>,
    /// Length of one profile cycle; `None` maps the whole profile onto
    /// `duration_s`.
    pub day_length_s: Option<f64>,
    pub duration_s: f64,
    /// Mean requests per second over a full cycle.
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            key_universe: 100_000,
            zipf_exponent: 1.0,
            user_count: 10_000,
            item_count: 20_000,
            candidates_per_request: 20,
            user_groups: vec!["u_profile".into(), "u_history".into(), "u_context".into()],
            item_groups: vec![
                "i_id".into(),
                "i_category".into(),
                "i_tags".into(),
                "i_author".into(),
                "i_stats".into(),
            ],
            features_per_group: 1,
            recurrence_prob: 0.6,
            recurrence_window_s: 120.0,
            feedback_prob: 0.0,
            feedback_delay_s: 30.0,
            diurnal_profile: default_diurnal_profile(),
            day_length_s: None,
            duration_s: 600.0,
            base_rate: 50.0,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_string()));
        if self.key_universe == 0 || self.user_count == 0 || self.item_count == 0 {
            return bad("key_universe, user_count and item_count must be positive");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be finite and nonnegative");
        }
        for (name, p) in [("recurrence_prob", self.recurrence_prob), ("feedback_prob", self.feedback_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.recurrence_prob >= 1.0 {
            return bad("recurrence_prob must be below 1");
        }
        if self.diurnal_profile.is_empty() || self.diurnal_profile.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("diurnal_profile weights must be positive");
        }
        if !(self.duration_s >= 0.0 && self.base_rate >= 0.0) {
            return bad("duration_s and base_rate must be nonnegative");
        }
        if !(self.recurrence_window_s > 0.0 && self.feedback_delay_s >= 0.0) {
            return bad("recurrence_window_s must be positive");
        }
        if self.day_length_s.is_some_and(|d| d <= 0.0) {
            return bad("day_length_s must be positive");
        }
        if self.candidates_per_request == 0 {
            return bad("candidates_per_request must be positive");
        }
        Ok(())
    }

    /// Profile rescaled to mean 1.
    pub fn normalized_profile(&self) -> Vec<f64> {
        let mean = self.diurnal_profile.iter().sum::<f64>() / self.diurnal_profile.len() as f64;
        self.diurnal_profile.iter().map(|w| w / mean).collect()
    }

    /// Relative traffic level at time `t`, linearly interpolated between
    /// hourly points on a cyclic day.
    pub fn traffic_level(&self, t: f64) -> f64 {
        let profile = self.normalized_profile();
        level_at(&profile, self.cycle_length(), t)
    }

    pub(crate) fn cycle_length(&self) -> f64 {
        self.day_length_s.unwrap_or(self.duration_s).max(f64::MIN_POSITIVE)
    }
}

pub(crate) fn level_at(profile: &[f64], cycle: f64, t: f64) -> f64 {
    let n = profile.len();
    let pos = (t / cycle).rem_euclid(1.0) * n as f64;
    let i = (pos.floor() as usize).min(n - 1);
    let frac = pos - i as f64;
    profile[i] * (1.0 - frac) + profile[(i + 1) % n] * frac
}
