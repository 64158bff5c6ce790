//! Central server: aggregate agent reports, compute fleet attention, select
//! and command unlearning, apply feature-level global down-weighting,
//! broadcast, and test convergence.
//!
//! The server commands per-point unlearning but the agents execute it by
//! ledger reversal; the corrected agents' next reports carry the correction
//! into the global average. Unlearn commands are issued at most once per id
//! (tombstoned here) so repeated reversal can never corrupt agent state.

use std::collections::{BTreeMap, BTreeSet};

use crate::agent::UpdateReport;
use crate::attention::{
    fleet_average, global_attention, modality_average, select_unlearn_set, FeatureAttention,
    Thresholds,
};
use crate::env::StreamBatch;
use crate::error::{FramuError, Result};
use crate::metrics::greedy_value;
use crate::model::{weighted_sum, ParamVector};

/// Sample-count weighted federated average of the agents' post-round
/// parameters. Agents that reported no live data are excluded; if nobody has
/// data the previous global model stands.
pub fn aggregate(reports: &[UpdateReport], prev_global: &ParamVector) -> Result<ParamVector> {
    if reports.is_empty() {
        return Err(FramuError::Domain {
            context: "aggregate",
            message: "no reports".into(),
        });
    }
    for r in reports {
        if !r.params.same_shape(prev_global) {
            return Err(FramuError::ShapeMismatch {
                context: "aggregate",
                expected: format!("{:?}", prev_global.shape()),
                got: format!("{:?}", r.params.shape()),
            });
        }
    }
    let live: Vec<&UpdateReport> = reports.iter().filter(|r| r.n_ag > 0).collect();
    if live.is_empty() {
        return Ok(prev_global.clone());
    }
    let vectors: Vec<ParamVector> = live.iter().map(|r| r.params.clone()).collect();
    let weights: Vec<f64> = live.iter().map(|r| r.n_ag as f64).collect();
    weighted_sum(&vectors, &weights)
}

/// Variant that scales each agent's weight by how well its round delta aligns
/// with the current global model. Falls back to plain `aggregate` when the
/// alignment scores carry no information (all equal, or all zero).
pub fn weighted_aggregate_by_alignment(
    reports: &[UpdateReport],
    prev_global: &ParamVector,
) -> Result<ParamVector> {
    if reports.is_empty() {
        return Err(FramuError::Domain {
            context: "weighted_aggregate_by_alignment",
            message: "no reports".into(),
        });
    }
    let live: Vec<&UpdateReport> = reports.iter().filter(|r| r.n_ag > 0).collect();
    if live.is_empty() {
        return Ok(prev_global.clone());
    }
    let mut alignments = Vec::with_capacity(live.len());
    for r in &live {
        alignments.push(global_attention(&r.delta, prev_global)?);
    }
    let spread = alignments.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - alignments.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = live
        .iter()
        .zip(alignments.iter())
        .map(|(r, a)| r.n_ag as f64 * a)
        .collect();
    if spread < 1e-12 || weights.iter().sum::<f64>() <= 0.0 {
        return aggregate(reports, prev_global);
    }
    let vectors: Vec<ParamVector> = live.iter().map(|r| r.params.clone()).collect();
    weighted_sum(&vectors, &weights)
}

/// Shrink the global coefficients of under-attended features: a feature with
/// attention below `theta` has every action-row coefficient scaled by
/// `attention / theta`, so attention zero zeroes the column and features at
/// or above `theta` are untouched.
pub fn global_feature_unlearn(
    params: &ParamVector,
    feat_att: &FeatureAttention,
    theta: f64,
) -> ParamVector {
    debug_assert!(theta > 0.0);
    let mut out = params.clone();
    let n_features = out.n_features();
    for a in 0..out.n_actions() {
        let row = out.row_mut(a);
        for i in 0..n_features {
            let att = feat_att.per_feature.get(i).copied().unwrap_or(1.0);
            if att < theta {
                row[i] *= att / theta;
            }
        }
    }
    out
}

/// True once the last two performance readings are within `eps`.
pub fn check_convergence(history: &[f64], eps: f64) -> bool {
    debug_assert!(eps > 0.0);
    match history {
        [.., a, b] => (b - a).abs() < eps,
        _ => false,
    }
}

/// What the server sends back to every agent after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub params: ParamVector,
    pub unlearn_ids: BTreeSet<u64>,
    pub round: u32,
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub params: ParamVector,
    /// Completed rounds.
    pub round: u32,
    /// One performance reading `P(W) = -validation MSE` per completed round.
    pub perf_history: Vec<f64>,
    pub eps_converge: f64,
    pub thresholds: Thresholds,
    pub alignment_weighting: bool,
    /// Live data points across the fleet at the last aggregation.
    pub total_points: u64,
    /// Ids already commanded for unlearning; never commanded twice.
    pub tombstones: BTreeSet<u64>,
    /// Guards the at-most-once-per-round application of feature unlearning.
    last_feature_unlearn_round: u32,
}

impl GlobalState {
    pub fn new(
        params: ParamVector,
        eps_converge: f64,
        thresholds: Thresholds,
        alignment_weighting: bool,
    ) -> Result<Self> {
        thresholds.validate()?;
        if eps_converge <= 0.0 {
            return Err(FramuError::Domain {
                context: "GlobalState",
                message: "eps_converge must be positive".into(),
            });
        }
        Ok(GlobalState {
            params,
            round: 0,
            perf_history: Vec::new(),
            eps_converge,
            thresholds,
            alignment_weighting,
            total_points: 0,
            tombstones: BTreeSet::new(),
            last_feature_unlearn_round: 0,
        })
    }

    /// Rebuild server state from a checkpoint. The feature-unlearn guard is
    /// set to the restored round, so the next application is round + 1.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        params: ParamVector,
        round: u32,
        perf_history: Vec<f64>,
        eps_converge: f64,
        thresholds: Thresholds,
        alignment_weighting: bool,
        total_points: u64,
        tombstones: BTreeSet<u64>,
    ) -> Self {
        GlobalState {
            params,
            round,
            perf_history,
            eps_converge,
            thresholds,
            alignment_weighting,
            total_points,
            tombstones,
            last_feature_unlearn_round: round,
        }
    }

    /// Fleet-average attention per data point: within an agent the point's
    /// scores are first averaged across its reporting modalities, then the
    /// per-agent values are averaged over the agents that reported the point.
    pub fn fleet_attention(reports: &[UpdateReport]) -> BTreeMap<u64, f64> {
        let mut per_id: BTreeMap<u64, Vec<(f64, usize)>> = BTreeMap::new();
        for rep in reports {
            let mut per_point: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for rec in &rep.snapshot {
                per_point.entry(rec.point_id).or_default().push(rec.score);
            }
            for (id, scores) in per_point {
                let agent_score = modality_average(&scores).expect("non-empty by construction");
                per_id.entry(id).or_default().push((agent_score, rep.n_ag));
            }
        }
        per_id
            .into_iter()
            .map(|(id, per_agent)| {
                let avg = fleet_average(&per_agent).expect("non-empty by construction");
                (id, avg)
            })
            .collect()
    }

    /// One server round over a complete batch of reports. Selects the unlearn
    /// set (attention rule, staleness rule, plus any forced ids), aggregates,
    /// applies feature-level unlearning, evaluates performance on the
    /// validation pool, and emits the broadcast.
    pub fn server_round(
        &mut self,
        reports: &[UpdateReport],
        forced: &BTreeSet<u64>,
        validation: &StreamBatch,
    ) -> Result<Broadcast> {
        if reports.is_empty() {
            return Err(FramuError::Domain {
                context: "server_round",
                message: "no reports".into(),
            });
        }
        let round = self.round + 1;

        let fleet = Self::fleet_attention(reports);
        let mut unlearn_ids = select_unlearn_set(&fleet, self.thresholds.global_theta);

        // staleness rule: points older than outdated_threshold rounds
        for rep in reports {
            for rec in &rep.snapshot {
                if round.saturating_sub(rec.created_round) > self.thresholds.outdated_threshold {
                    unlearn_ids.insert(rec.point_id);
                }
            }
        }
        unlearn_ids.extend(forced.iter().copied());
        unlearn_ids = unlearn_ids
            .difference(&self.tombstones)
            .copied()
            .collect();
        self.tombstones.extend(unlearn_ids.iter().copied());

        self.total_points = reports.iter().map(|r| r.n_ag as u64).sum();

        let aggregated = if self.alignment_weighting {
            weighted_aggregate_by_alignment(reports, &self.params)?
        } else {
            aggregate(reports, &self.params)?
        };

        // feature-level unlearning, applied at most once per round
        assert!(
            self.last_feature_unlearn_round < round,
            "feature unlearning applied twice in round {}",
            round
        );
        self.last_feature_unlearn_round = round;
        let feat_att = Self::fleet_feature_attention(reports, aggregated.n_features());
        let params = global_feature_unlearn(
            &aggregated,
            &feat_att,
            self.thresholds.irrelevant_threshold,
        );

        let perf = -validation_mse(&params, validation)?;
        self.perf_history.push(perf);
        self.params = params.clone();
        self.round = round;

        Ok(Broadcast {
            params,
            unlearn_ids,
            round,
        })
    }

    /// Sample-count weighted mean of the agents' per-feature attention.
    pub fn fleet_feature_attention(reports: &[UpdateReport], n_features: usize) -> FeatureAttention {
        let mut acc = vec![0.0; n_features];
        let mut total = 0.0;
        for rep in reports.iter().filter(|r| r.n_ag > 0) {
            total += rep.n_ag as f64;
            for (a, v) in acc.iter_mut().zip(rep.feature_attention.iter()) {
                *a += rep.n_ag as f64 * v;
            }
        }
        if total > 0.0 {
            for a in acc.iter_mut() {
                *a /= total;
            }
        } else {
            acc = vec![1.0; n_features];
        }
        FeatureAttention { per_feature: acc }
    }

    pub fn converged(&self) -> bool {
        check_convergence(&self.perf_history, self.eps_converge)
    }
}

/// MSE of a model's greedy-value predictions against a batch's targets.
pub fn validation_mse(params: &ParamVector, batch: &StreamBatch) -> Result<f64> {
    let preds: Vec<f64> = batch
        .points
        .iter()
        .map(|p| greedy_value(params, &p.features))
        .collect();
    let targets: Vec<f64> = batch.points.iter().map(|p| p.target).collect();
    crate::metrics::mse(&preds, &targets)
}

/// MAE counterpart of [`validation_mse`].
pub fn validation_mae(params: &ParamVector, batch: &StreamBatch) -> Result<f64> {
    let preds: Vec<f64> = batch
        .points
        .iter()
        .map(|p| greedy_value(params, &p.features))
        .collect();
    let targets: Vec<f64> = batch.points.iter().map(|p| p.target).collect();
    crate::metrics::mae(&preds, &targets)
}
