//! Advantage estimation over reward groups (one group per source text).
//!
//! Three modes:
//!
//! * `centering`: `a = (r − mean_group) · scale(kind)`
//! * `group_norm`: `a = (r − mean_group) / max(std_group, ε) · scale(kind)`
//! * `batch_norm`: `a = (r − mean_batch) / max(std_batch, ε) · scale(kind)`
//!
//! Standard deviations are population deviations. Scaling is applied after
//! centering/normalization.
//!
//! Two diagnostics come with every report. *Amplified variance* is the share
//! of groups whose reward std is below `std_threshold` minus the share whose
//! normalized (pre-scaling) std still is. *Same sign* is the share of groups
//! whose advantages are all strictly positive or all strictly negative.

use serde::{Deserialize, Serialize};

use crate::sampler::SourceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    #[default]
    Centering,
    GroupNorm,
    BatchNorm,
}

impl AdvantageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Centering => "centering",
            Self::GroupNorm => "group_norm",
            Self::BatchNorm => "batch_norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub mode: AdvantageMode,
    pub scale_query: f64,
    pub scale_relevant: f64,
    pub scale_irrelevant: f64,
    pub epsilon: f64,
    pub std_threshold: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            mode: AdvantageMode::Centering,
            scale_query: 1.0,
            scale_relevant: 0.2,
            scale_irrelevant: 0.1,
            epsilon: 1e-8,
            std_threshold: 0.02,
        }
    }
}

impl AdvantageConfig {
    pub fn scale(&self, kind: SourceKind) -> f64 {
        match kind {
            SourceKind::Query => self.scale_query,
            SourceKind::RelevantDoc => self.scale_relevant,
            SourceKind::IrrelevantDoc => self.scale_irrelevant,
        }
    }

    /// All scales set to 1.
    pub fn unscaled(mut self) -> Self {
        self.scale_query = 1.0;
        self.scale_relevant = 1.0;
        self.scale_irrelevant = 1.0;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("scale_query", self.scale_query),
            ("scale_relevant", self.scale_relevant),
            ("scale_irrelevant", self.scale_irrelevant),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("advantage.{name} must be positive, got {v}"));
            }
        }
        if !(self.std_threshold >= 0.0) {
            return Err("advantage.std_threshold must be non-negative".into());
        }
        Ok(())
    }
}

/// Rewards of all rollouts generated from one source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub source_id: String,
    pub kind: SourceKind,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    pub mode: AdvantageMode,
    /// Aligned with the input groups.
    pub advantages: Vec<Vec<f64>>,
    pub pre_std: Vec<f64>,
    /// Std of the centered/normalized values before per-kind scaling.
    pub post_std: Vec<f64>,
    pub amplified_variance: f64,
    pub same_sign: f64,
}

/// Mean that returns the common value exactly when all inputs are equal.
fn mean(xs: &[f64]) -> f64 {
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    min + xs.iter().map(|x| x - min).sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64], mu: f64) -> f64 {
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn compute_advantages(groups: &[RewardGroup], config: &AdvantageConfig) -> AdvantageReport {
    let eps = config.epsilon;
    let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let (batch_mean, batch_scale) = if all.is_empty() {
        (0.0, 1.0)
    } else {
        let m = mean(&all);
        (m, std_dev(&all, m).max(eps))
    };

    let mut advantages = Vec::with_capacity(groups.len());
    let mut pre_std = Vec::with_capacity(groups.len());
    let mut post_std = Vec::with_capacity(groups.len());
    for g in groups {
        if g.rewards.is_empty() {
            advantages.push(Vec::new());
            pre_std.push(0.0);
            post_std.push(0.0);
            continue;
        }
        let mu = mean(&g.rewards);
        let sd = std_dev(&g.rewards, mu);
        let normalized: Vec<f64> = match config.mode {
            AdvantageMode::Centering => g.rewards.iter().map(|r| r - mu).collect(),
            AdvantageMode::GroupNorm => {
                let denom = sd.max(eps);
                g.rewards.iter().map(|r| (r - mu) / denom).collect()
            }
            AdvantageMode::BatchNorm => g.rewards.iter().map(|r| (r - batch_mean) / batch_scale).collect(),
        };
        pre_std.push(sd);
        post_std.push(std_dev(&normalized, mean(&normalized)));
        let scale = config.scale(g.kind);
        advantages.push(normalized.into_iter().map(|a| a * scale).collect());
    }

    let (amplified_variance, same_sign) = anomaly_fractions(&pre_std, &post_std, &advantages, config.std_threshold);
    AdvantageReport {
        mode: config.mode,
        advantages,
        pre_std,
        post_std,
        amplified_variance,
        same_sign,
    }
}

fn anomaly_fractions(pre_std: &[f64], post_std: &[f64], advantages: &[Vec<f64>], threshold: f64) -> (f64, f64) {
    let n = advantages.iter().filter(|a| !a.is_empty()).count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let below = |xs: &[f64]| {
        xs.iter()
            .zip(advantages)
            .filter(|(s, a)| !a.is_empty() && **s < threshold)
            .count() as f64
    };
    let amplified = (below(pre_std) - below(post_std)) / n as f64;
    let same = advantages
        .iter()
        .filter(|a| !a.is_empty() && (a.iter().all(|v| *v > 0.0) || a.iter().all(|v| *v < 0.0)))
        .count() as f64
        / n as f64;
    (amplified, same)
}

/// `(amplified_variance_fraction, same_sign_fraction)` for `groups` under `config.mode`.
pub fn anomaly_stats(groups: &[RewardGroup], config: &AdvantageConfig) -> (f64, f64) {
    let r = compute_advantages(groups, config);
    (r.amplified_variance, r.same_sign)
}
