//! Round-loop orchestrator: local training, privacy, aggregation, unlearning
//! dispatch, mixing, convergence stop, and experiment sweeps.
//!
//! Order within a round is fixed: local train -> privacy -> aggregate ->
//! global feature unlearn -> evaluate P -> broadcast -> local unlearn ->
//! beta fine-tune -> lambda multimodal mix -> convergence check. Agents run
//! fork-join in parallel; each owns a private seeded generator, so results
//! are identical regardless of scheduling.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{fine_tune, AgentState, UpdateReport};
use crate::attention::AttentionTable;
use crate::config::SimConfig;
use crate::env::{mix, DriftSpec, Environment, EnvSpec, StreamBatch};
use crate::error::{FramuError, Result};
use crate::metrics::{activation_distance, reconstruction_error, UnlearningReport};
use crate::model::{weighted_sum, ParamVector};
use crate::privacy;
use crate::server::{validation_mae, validation_mse, GlobalState};

const TAG_AGENT: u64 = 0x6167_656e;
const TAG_PRIVACY: u64 = 0x7072_6976;
const TAG_RETAIN: u64 = 0x7265_7461;

/// Per-agent numbers carried in each round's log row.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRoundStats {
    pub n_ag: usize,
    pub mean_attention: f64,
    pub reward: f64,
}

/// Per-round record of global metrics, per-agent stats, and the convergence
/// signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    pub global_mse: f64,
    pub global_mae: f64,
    pub perf: f64,
    pub unlearned_count: usize,
    pub converged: bool,
    pub per_agent: Vec<AgentRoundStats>,
}

/// One attention snapshot row, as serialized to `attention.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionLogRow {
    pub round: u32,
    pub agent_id: usize,
    pub point_id: u64,
    pub modality: usize,
    pub score: f64,
}

/// Captured models around an unlearning event, for recomputation oracles.
#[derive(Debug, Clone)]
pub struct UnlearnEvent {
    pub round: u32,
    pub unlearn_ids: BTreeSet<u64>,
    pub model_before: ParamVector,
    pub model_after: ParamVector,
    pub report: UnlearningReport,
}

#[derive(Debug)]
pub struct Simulation {
    cfg: SimConfig,
    env: Environment,
    agents: Vec<AgentState>,
    global: GlobalState,
    privacy_rngs: Vec<ChaCha8Rng>,
    queued_unlearn: BTreeSet<u64>,
    logs: Vec<RoundLog>,
    attention_log: Vec<AttentionLogRow>,
    unlearn_events: Vec<UnlearnEvent>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        crate::config::validate(&cfg)?;
        let spec = build_env_spec(&cfg)?;
        let env = Environment::new(spec)?;
        let params = ParamVector::zeros(cfg.env.n_actions, cfg.env.n_features);

        let mut agents = Vec::with_capacity(cfg.env.n_agents);
        for k in 0..cfg.env.n_agents {
            let key = if cfg.env.shared_stream { 0 } else { k as u64 };
            let mut agent_cfg = cfg.agent;
            agent_cfg.local_delta = cfg.attention.thresholds.local_delta;
            agents.push(AgentState::new(
                k,
                params.clone(),
                AttentionTable::new(cfg.attention.eta, cfg.attention.rho, cfg.attention.a_max),
                agent_cfg,
                mix(cfg.seed ^ TAG_AGENT, key, 0),
            ));
        }

        let privacy_rngs = (0..cfg.env.n_agents)
            .map(|k| ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ TAG_PRIVACY, k as u64, 0)))
            .collect();

        let global = GlobalState::new(
            params,
            cfg.server.eps_converge,
            cfg.attention.thresholds,
            cfg.server.alignment_weighting,
        )?;

        Ok(Simulation {
            cfg,
            env,
            agents,
            global,
            privacy_rngs,
            queued_unlearn: BTreeSet::new(),
            logs: Vec::new(),
            attention_log: Vec::new(),
            unlearn_events: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn round(&self) -> u32 {
        self.global.round
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn attention_log(&self) -> &[AttentionLogRow] {
        &self.attention_log
    }

    pub fn unlearn_events(&self) -> &[UnlearnEvent] {
        &self.unlearn_events
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    /// Queue ids to be force-unlearned at the next server round (the ids join
    /// that round's broadcast and are tombstoned like any other command).
    pub fn queue_unlearn(&mut self, ids: impl IntoIterator<Item = u64>) {
        self.queued_unlearn.extend(ids);
    }

    /// Execute one full round and append its log.
    pub fn step_round(&mut self) -> Result<RoundLog> {
        let round = self.global.round + 1;
        let steps = self.cfg.steps_per_round;

        // fresh data is generated serially (the archive is a single writer),
        // the agents then train fork-join against an immutable env view
        let batches: Vec<StreamBatch> = (0..self.agents.len())
            .map(|k| self.env.gen_round(k, round))
            .collect();

        let env = &self.env;
        let mut reports: Vec<UpdateReport> = self
            .agents
            .par_iter_mut()
            .zip(batches.into_par_iter())
            .map(|(agent, batch)| {
                let mut source = env.source();
                agent.run_round(&mut source, batch.points, round, steps)
            })
            .collect::<Result<Vec<_>>>()?;

        if self.cfg.privacy.enabled {
            for (rep, rng) in reports.iter_mut().zip(self.privacy_rngs.iter_mut()) {
                let noised = privacy::perturb(&rep.delta, &self.cfg.privacy, rng);
                rep.params = rep.params.sub(&rep.delta).add(&noised);
                rep.delta = noised;
            }
        }

        for rep in &reports {
            if rep.starved {
                log::warn!("agent {} starved in round {}", rep.agent_id, round);
            }
            for rec in &rep.snapshot {
                self.attention_log.push(AttentionLogRow {
                    round,
                    agent_id: rep.agent_id,
                    point_id: rec.point_id,
                    modality: rec.modality,
                    score: rec.score,
                });
            }
        }

        let validation = self.env.validation_pool(round);
        let forced = std::mem::take(&mut self.queued_unlearn);
        let broadcast = self.global.server_round(&reports, &forced, &validation)?;

        let unlearned_count = broadcast.unlearn_ids.len();
        if unlearned_count > 0 {
            log::info!("round {}: unlearning {} points", round, unlearned_count);
            for agent in &mut self.agents {
                agent.local_unlearn(&broadcast.unlearn_ids);
            }
            let event = self.measure_unlearn_event(round, &broadcast.params, &broadcast.unlearn_ids, &validation)?;
            self.unlearn_events.push(event);
        }

        let mask = vec![true; self.cfg.env.n_features];
        for agent in &mut self.agents {
            let tuned = fine_tune(&agent.params, &broadcast.params, self.cfg.server.beta)?;
            agent.params = multimodal_mix(&tuned, &broadcast.params, self.cfg.server.lambda, &mask)?;
        }

        let perf = *self.global.perf_history.last().expect("just pushed");
        let log = RoundLog {
            round,
            global_mse: -perf,
            global_mae: validation_mae(&broadcast.params, &validation)?,
            perf,
            unlearned_count,
            converged: self.global.converged(),
            per_agent: reports
                .iter()
                .map(|r| AgentRoundStats {
                    n_ag: r.n_ag,
                    mean_attention: if r.snapshot.is_empty() {
                        0.0
                    } else {
                        r.snapshot.iter().map(|s| s.score).sum::<f64>() / r.snapshot.len() as f64
                    },
                    reward: r.cum_reward,
                })
                .collect(),
        };
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Paired before/after metrics around the local-unlearn application of a
    /// round. "After" is the virtual re-aggregate of the agents' post-unlearn
    /// parameters, so the numbers isolate the ledger reversal itself.
    fn measure_unlearn_event(
        &mut self,
        round: u32,
        model_before: &ParamVector,
        unlearn_ids: &BTreeSet<u64>,
        validation: &StreamBatch,
    ) -> Result<UnlearnEvent> {
        let live: Vec<&AgentState> = self.agents.iter().filter(|a| a.n_ag() > 0).collect();
        let model_after = if live.is_empty() {
            model_before.clone()
        } else {
            let vectors: Vec<ParamVector> = live.iter().map(|a| a.params.clone()).collect();
            let weights: Vec<f64> = live.iter().map(|a| a.n_ag() as f64).collect();
            weighted_sum(&vectors, &weights)?
        };

        // commanded ids that were never emitted carry no data; skip them
        let known: BTreeSet<u64> = unlearn_ids
            .iter()
            .copied()
            .filter(|id| self.env.archived_point(*id).is_some())
            .collect();
        let forget = self.env.forget_set(&known)?;

        let retain = self.retain_sample(round, &known, forget.points.len());

        let mse_before = validation_mse(model_before, validation)?;
        let mse_after = validation_mse(&model_after, validation)?;
        let mae_before = validation_mae(model_before, validation)?;
        let mae_after = validation_mae(&model_after, validation)?;

        let (mut re_before, mut re, mut ad_forget) = (0.0, 0.0, 0.0);
        if !forget.points.is_empty() {
            re_before = reconstruction_error(
                model_before,
                forget.points.iter().map(|p| (p.features.as_slice(), p.target)),
            )?;
            re = reconstruction_error(
                &model_after,
                forget.points.iter().map(|p| (p.features.as_slice(), p.target)),
            )?;
            ad_forget = activation_distance(
                model_before,
                &model_after,
                forget.points.iter().map(|p| p.features.as_slice()),
            )?;
        }
        let (mut re_retain, mut ad_retain) = (0.0, 0.0);
        if !retain.is_empty() {
            re_retain = reconstruction_error(
                &model_after,
                retain.iter().map(|p| (p.features.as_slice(), p.target)),
            )?;
            ad_retain = activation_distance(
                model_before,
                &model_after,
                retain.iter().map(|p| p.features.as_slice()),
            )?;
        }

        Ok(UnlearnEvent {
            round,
            unlearn_ids: known,
            model_before: model_before.clone(),
            model_after: model_after.clone(),
            report: UnlearningReport {
                round,
                n_forget: forget.points.len(),
                mse_before,
                mse_after,
                mae_before,
                mae_after,
                re_before,
                re,
                re_retain,
                ad_forget,
                ad_retain,
            },
        })
    }

    /// Size-matched deterministic sample of still-live points.
    fn retain_sample(
        &self,
        round: u32,
        exclude: &BTreeSet<u64>,
        n: usize,
    ) -> Vec<crate::model::DataPoint> {
        let mut live: Vec<u64> = self
            .agents
            .iter()
            .flat_map(|a| a.replay.iter().copied())
            .filter(|id| !exclude.contains(id))
            .collect();
        live.sort_unstable();
        live.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(
            self.cfg.seed ^ TAG_RETAIN,
            round as u64,
            0,
        ));
        let take = n.min(live.len());
        // partial Fisher-Yates over the sorted id list
        for i in 0..take {
            let j = i + rand::Rng::random_range(&mut rng, 0..(live.len() - i));
            live.swap(i, j);
        }
        live.truncate(take);
        live.sort_unstable();
        live.iter()
            .filter_map(|id| self.env.archived_point(*id).cloned())
            .collect()
    }

    /// Run until `t_max` rounds or convergence, whichever stops first.
    pub fn run(&mut self) -> Result<()> {
        while self.global.round < self.cfg.t_max {
            let log = self.step_round()?;
            if log.converged {
                log::info!("converged at round {}", log.round);
                break;
            }
        }
        Ok(())
    }
}

fn build_env_spec(cfg: &SimConfig) -> Result<EnvSpec> {
    let drift = cfg.env.drift_round.map(|round| DriftSpec {
        round,
        flipped_features: cfg.env.drift_features.clone(),
    });
    Ok(EnvSpec {
        n_features: cfg.env.n_features,
        n_actions: cfg.env.n_actions,
        n_modalities: cfg.env.n_modalities,
        n_agents: cfg.env.n_agents,
        true_params: EnvSpec::build_true_params(
            cfg.seed,
            cfg.env.n_actions,
            cfg.env.n_features,
            cfg.env.true_param_scale,
            &cfg.env.irrelevant_features,
        ),
        noise_std: cfg.env.noise_std,
        drift,
        private_fraction: cfg.env.private_fraction,
        irrelevant_features: cfg.env.irrelevant_features.clone(),
        points_per_agent_per_round: cfg.env.points_per_round,
        chain_len: cfg.env.chain_len,
        seed: cfg.seed,
        non_iid: cfg.env.non_iid,
        shared_stream: cfg.env.shared_stream,
    })
}

/// Lambda-blend toward the global model, applied only to the feature columns
/// selected by `feature_mask`; everything else is copied from the local side.
pub fn multimodal_mix(
    local: &ParamVector,
    global_model: &ParamVector,
    lambda: f64,
    feature_mask: &[bool],
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FramuError::Domain {
            context: "multimodal_mix",
            message: format!("lambda {} outside [0, 1]", lambda),
        });
    }
    if !local.same_shape(global_model) || feature_mask.len() != local.n_features() {
        return Err(FramuError::ShapeMismatch {
            context: "multimodal_mix",
            expected: format!("{:?}", local.shape()),
            got: format!("{:?} / mask {}", global_model.shape(), feature_mask.len()),
        });
    }
    let mut out = local.clone();
    let n_features = local.n_features();
    for a in 0..local.n_actions() {
        let g = global_model.row(a);
        let row = out.row_mut(a);
        for i in 0..n_features {
            if feature_mask[i] {
                row[i] = lambda * g[i] + (1.0 - lambda) * row[i];
            }
        }
    }
    Ok(out)
}

/// Run the full loop for one config.
pub fn run_simulation(cfg: SimConfig) -> Result<Vec<RoundLog>> {
    let mut sim = Simulation::new(cfg)?;
    sim.run()?;
    Ok(sim.logs.clone())
}

/// Run `run_simulation` once per value of the swept key, same seed each time.
pub fn sweep(
    base: &SimConfig,
    param: &str,
    values: &[String],
) -> Result<Vec<(String, Vec<RoundLog>)>> {
    let mut out = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        crate::config::set_key_str(&mut cfg, param, v)?;
        crate::config::validate(&cfg)?;
        out.push((v.clone(), run_simulation(cfg)?));
    }
    Ok(out)
}
