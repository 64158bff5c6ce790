//! Attention scores at data-point, feature, modality, and fleet level.
//!
//! Scores are stateful: initialized to a uniform 1.0, bumped by `eta * |td|`
//! whenever the point participates in a TD update, multiplicatively decayed
//! by `rho` once per round, and capped at `a_max`. Decay supplies the
//! "old data loses relevance" dynamic that the unlearning thresholds act on.
//!
//! Thresholds compare with strict `<`: a score exactly at the threshold
//! survives, so a fleet at uniform initialization is never mass-unlearned.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{FramuError, Result};
use crate::model::{DataPoint, ParamVector};

/// Per-agent map from data-point id to attention score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTable {
    scores: BTreeMap<u64, f64>,
    pub a_max: f64,
    pub eta: f64,
    pub rho: f64,
}

impl AttentionTable {
    pub fn new(eta: f64, rho: f64, a_max: f64) -> Self {
        assert!(a_max > 0.0 && eta >= 0.0 && rho > 0.0 && rho <= 1.0);
        AttentionTable {
            scores: BTreeMap::new(),
            a_max,
            eta,
            rho,
        }
    }

    /// Rebuild a table from stored scores (checkpoint restore).
    pub fn from_scores(
        scores: impl IntoIterator<Item = (u64, f64)>,
        eta: f64,
        rho: f64,
        a_max: f64,
    ) -> Self {
        let mut t = AttentionTable::new(eta, rho, a_max);
        t.scores.extend(scores);
        t
    }

    /// Register a new point at the uniform initial score.
    pub fn insert_point(&mut self, point: &DataPoint, params: &ParamVector) {
        self.scores.insert(point.id, init_score(point, params));
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    /// Score for a point, falling back to the initialization value for points
    /// not yet tracked (e.g. the successor state of a transition).
    pub fn score_or_init(&self, id: u64) -> f64 {
        self.scores.get(&id).copied().unwrap_or(1.0)
    }

    pub fn remove(&mut self, id: u64) -> Option<f64> {
        self.scores.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.scores.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.scores.iter().map(|(id, s)| (*id, *s))
    }

    /// Bump the stored score for `id` by `eta * |delta|`, clamped to `a_max`.
    pub fn bump(&mut self, id: u64, delta: f64) {
        let (eta, a_max) = (self.eta, self.a_max);
        if let Some(s) = self.scores.get_mut(&id) {
            *s = bump_on_td(*s, delta, eta, a_max);
        }
    }

    /// Multiply every score by `rho`. Applied once at the start of a round,
    /// before any bumps.
    pub fn decay_round(&mut self) {
        for s in self.scores.values_mut() {
            *s *= self.rho;
        }
    }

    pub fn mean_score(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.scores.values().sum::<f64>() / self.scores.len() as f64
        }
    }
}

/// Initial attention score for a new point. Uniform by choice: the update
/// rule `A += eta * |td|` is the only signal the score carries afterwards.
pub fn init_score(_point: &DataPoint, _params: &ParamVector) -> f64 {
    1.0
}

/// `min(score + eta * |delta|, a_max)`.
pub fn bump_on_td(score: f64, delta: f64, eta: f64, a_max: f64) -> f64 {
    (score + eta * delta.abs()).min(a_max)
}

/// Arithmetic mean of one point's scores across modalities.
pub fn modality_average(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(FramuError::Domain {
            context: "modality_average",
            message: "no modality scores".into(),
        });
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Unweighted mean over reporting agents; agents that never saw the point are
/// not in the list and therefore do not count toward the denominator.
pub fn fleet_average(per_agent: &[(f64, usize)]) -> Result<f64> {
    if per_agent.is_empty() {
        return Err(FramuError::Domain {
            context: "fleet_average",
            message: "no agent reported a score".into(),
        });
    }
    Ok(per_agent.iter().map(|(s, _)| s).sum::<f64>() / per_agent.len() as f64)
}

/// Alignment of an agent update with the current global model, mapped from
/// cosine similarity into [0, 1]. An all-zero vector on either side carries
/// no directional information and scores a neutral 0.5.
pub fn global_attention(update: &ParamVector, global_params: &ParamVector) -> Result<f64> {
    if !update.same_shape(global_params) {
        return Err(FramuError::ShapeMismatch {
            context: "global_attention",
            expected: format!("{:?}", global_params.shape()),
            got: format!("{:?}", update.shape()),
        });
    }
    let nu = update.l2_norm();
    let ng = global_params.l2_norm();
    if nu == 0.0 || ng == 0.0 {
        return Ok(0.5);
    }
    let dot: f64 = update
        .values()
        .iter()
        .zip(global_params.values().iter())
        .map(|(a, b)| a * b)
        .sum();
    let cosine = (dot / (nu * ng)).clamp(-1.0, 1.0);
    Ok((1.0 + cosine) / 2.0)
}

/// Exactly the ids whose fleet-average score is strictly below `theta`.
pub fn select_unlearn_set(fleet_avgs: &BTreeMap<u64, f64>, theta: f64) -> BTreeSet<u64> {
    fleet_avgs
        .iter()
        .filter(|(_, s)| **s < theta)
        .map(|(id, _)| *id)
        .collect()
}

/// Per-feature attention derived from point-level scores: attention-weighted
/// mean |feature value| over live points, normalized by the feature's max
/// |value| so every entry lands in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAttention {
    pub per_feature: Vec<f64>,
}

impl FeatureAttention {
    pub fn compute<'a>(
        points: impl Iterator<Item = (&'a DataPoint, f64)>,
        n_features: usize,
    ) -> FeatureAttention {
        let mut weighted = vec![0.0; n_features];
        let mut max_abs = vec![0.0; n_features];
        let mut total_score = 0.0;
        for (point, score) in points {
            total_score += score;
            for (i, x) in point.features.iter().enumerate() {
                weighted[i] += score * x.abs();
                max_abs[i] = max_abs[i].max(x.abs());
            }
        }
        let per_feature = weighted
            .iter()
            .zip(max_abs.iter())
            .map(|(w, m)| {
                if total_score > 0.0 && *m > 0.0 {
                    (w / total_score) / m
                } else {
                    0.0
                }
            })
            .collect();
        FeatureAttention { per_feature }
    }
}

/// The threshold knobs driving unlearning decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Fleet-average attention below which a point is unlearned globally.
    pub global_theta: f64,
    /// Local score below which an agent may purge a point on its own.
    pub local_delta: f64,
    /// Staleness limit: points older than this many rounds are force-unlearned.
    pub outdated_threshold: u32,
    /// Feature attention below which a feature's global coefficients shrink.
    pub irrelevant_threshold: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.global_theta <= 0.0
            || self.local_delta <= 0.0
            || self.outdated_threshold == 0
            || self.irrelevant_threshold <= 0.0
        {
            return Err(FramuError::Domain {
                context: "Thresholds",
                message: "all thresholds must be strictly positive".into(),
            });
        }
        Ok(())
    }
}
