//! Synthetic multi-agent environments with ground-truth linear reward
//! structure and scheduled injection of outdated, private, and irrelevant
//! data.
//!
//! Generation is a pure function of `(seed, agent, round)`, so batches can be
//! regenerated at any time (checkpoint resume replays the archive instead of
//! persisting it). Rewards are keyed by `(seed, point id, action)` so that an
//! agent asking for the same (point, action) pair always sees the same
//! reward, no matter when or how often it asks.
//!
//! "Outdated" is modeled as a label-regime change: after `drift.round` the
//! true parameters flip sign on a feature subset, while points generated
//! earlier keep their old-regime targets and rewards.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::TransitionSource;
use crate::error::{FramuError, Result};
use crate::model::{modality_partition, DataPoint, ModalityDescriptor, ParamVector, PointFlags};

pub const VALIDATION_POOL_SIZE: usize = 1000;

const TAG_TRUE: u64 = 0x7452_5545;
const TAG_OFFSET: u64 = 0x6f66_6673;
const TAG_ROUND: u64 = 0x726e_6400;
const TAG_NOISE: u64 = 0x6e6f_6973;
const TAG_VAL: u64 = 0x7661_6c00;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(seed ^ splitmix(a ^ splitmix(b)))
}

/// Label-regime change: from `round + 1` onward, the true parameters have
/// their sign flipped on `flipped_features`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriftSpec {
    pub round: u32,
    pub flipped_features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_features: usize,
    pub n_actions: usize,
    pub n_modalities: usize,
    pub n_agents: usize,
    pub true_params: ParamVector,
    pub noise_std: f64,
    pub drift: Option<DriftSpec>,
    pub private_fraction: f64,
    pub irrelevant_features: Vec<usize>,
    pub points_per_agent_per_round: usize,
    /// Episode length; 1 is contextual-bandit style, >1 chains points.
    pub chain_len: usize,
    pub seed: u64,
    /// Per-agent mean offsets on features (the non-IID mechanism).
    pub non_iid: bool,
    /// Degenerate plumbing-validation mode: every agent sees the identical
    /// stream (same points, same ids).
    pub shared_stream: bool,
}

impl EnvSpec {
    /// Draw ground-truth parameters: N(0, scale^2) per coefficient, exactly
    /// zero on irrelevant features.
    pub fn build_true_params(
        seed: u64,
        n_actions: usize,
        n_features: usize,
        scale: f64,
        irrelevant_features: &[usize],
    ) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, TAG_TRUE, 0));
        let mut params = ParamVector::zeros(n_actions, n_features);
        for v in params.values_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = scale * n;
        }
        for a in 0..n_actions {
            let row = params.row_mut(a);
            for &i in irrelevant_features {
                row[i] = 0.0;
            }
        }
        params
    }

    pub fn modalities(&self) -> Vec<ModalityDescriptor> {
        modality_partition(self.n_features, self.n_modalities)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_shapes = self.n_features >= 1
            && self.n_actions >= 1
            && self.n_modalities >= 1
            && self.n_modalities <= self.n_features
            && self.n_agents >= 1
            && self.points_per_agent_per_round >= 1
            && self.chain_len >= 1;
        if !ok_shapes {
            return Err(FramuError::Domain {
                context: "EnvSpec",
                message: "all sizes must be at least 1 (and modalities <= features)".into(),
            });
        }
        if self.true_params.shape() != (self.n_actions, self.n_features) {
            return Err(FramuError::ShapeMismatch {
                context: "EnvSpec",
                expected: format!("({}, {})", self.n_actions, self.n_features),
                got: format!("{:?}", self.true_params.shape()),
            });
        }
        if !(0.0..=1.0).contains(&self.private_fraction) || self.noise_std < 0.0 {
            return Err(FramuError::Domain {
                context: "EnvSpec",
                message: "private_fraction in [0,1], noise_std >= 0".into(),
            });
        }
        for &i in &self.irrelevant_features {
            if i >= self.n_features {
                return Err(FramuError::Domain {
                    context: "EnvSpec",
                    message: format!("irrelevant feature index {} out of range", i),
                });
            }
            for a in 0..self.n_actions {
                if self.true_params.row(a)[i] != 0.0 {
                    return Err(FramuError::Domain {
                        context: "EnvSpec",
                        message: format!("true params not zero on irrelevant feature {}", i),
                    });
                }
            }
        }
        if let Some(d) = &self.drift {
            for &i in &d.flipped_features {
                if i >= self.n_features {
                    return Err(FramuError::Domain {
                        context: "EnvSpec",
                        message: format!("drift feature index {} out of range", i),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One round's worth of fresh observations for one agent, plus the episode
/// chain structure linking them.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub points: Vec<DataPoint>,
    /// `successors[id]` is the next state in `id`'s episode; absent means the
    /// episode terminates after `id`.
    pub successors: BTreeMap<u64, u64>,
    pub round: u32,
}

/// Stateful wrapper around the pure generator: keeps an archive of every
/// emitted point so forget sets can be materialized after unlearning.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    archive: BTreeMap<u64, DataPoint>,
    successors: BTreeMap<u64, u64>,
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Environment {
            spec,
            archive: BTreeMap::new(),
            successors: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn agent_key(&self, agent_id: usize) -> u64 {
        if self.spec.shared_stream {
            0
        } else {
            agent_id as u64
        }
    }

    fn point_id(&self, agent_id: usize, round: u32, idx: usize) -> u64 {
        ((self.agent_key(agent_id) + 1) << 40) | ((round as u64) << 20) | idx as u64
    }

    /// Per-agent feature mean offsets, Uniform(-1, 1), drawn once per agent.
    pub fn agent_offsets(&self, agent_id: usize) -> Vec<f64> {
        if !self.spec.non_iid {
            return vec![0.0; self.spec.n_features];
        }
        let key = self.agent_key(agent_id);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, TAG_OFFSET, key));
        (0..self.spec.n_features)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect()
    }

    /// True parameters in force at `round` (old regime through `drift.round`,
    /// flipped regime afterwards).
    pub fn regime_params(&self, round: u32) -> ParamVector {
        let mut params = self.spec.true_params.clone();
        if let Some(d) = &self.spec.drift {
            if round > d.round {
                for a in 0..self.spec.n_actions {
                    let row = params.row_mut(a);
                    for &i in &d.flipped_features {
                        row[i] = -row[i];
                    }
                }
            }
        }
        params
    }

    fn noise_for(&self, id: u64, key: u64) -> f64 {
        if self.spec.noise_std == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed ^ TAG_NOISE, id, key));
        let n: f64 = rng.sample(StandardNormal);
        self.spec.noise_std * n
    }

    /// Best achievable reward for a feature vector under the regime of
    /// `round`, before noise.
    pub fn oracle_value(&self, features: &[f64], round: u32) -> f64 {
        let params = self.regime_params(round);
        crate::metrics::greedy_value(&params, features)
    }

    /// Reward for taking `action` on `point`. The point's own creation regime
    /// applies, so stale points keep teaching the old regime.
    pub fn reward(&self, point: &DataPoint, action: usize) -> f64 {
        let params = self.regime_params(point.created_round);
        let mean: f64 = params
            .row(action)
            .iter()
            .zip(point.features.iter())
            .map(|(w, x)| w * x)
            .sum();
        mean + self.noise_for(point.id, action as u64)
    }

    /// Emit the fresh observations for `(agent_id, round)`. Pure in its
    /// arguments: calling twice returns the identical batch.
    pub fn gen_round(&mut self, agent_id: usize, round: u32) -> StreamBatch {
        assert!(round >= 1, "rounds are 1-based");
        let key = self.agent_key(agent_id);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed ^ TAG_ROUND, key, round as u64));
        let offsets = self.agent_offsets(agent_id);
        let outdated_after = self
            .spec
            .drift
            .as_ref()
            .filter(|d| round <= d.round)
            .map(|d| d.round);

        let mut points = Vec::with_capacity(self.spec.points_per_agent_per_round);
        for idx in 0..self.spec.points_per_agent_per_round {
            let features: Vec<f64> = offsets
                .iter()
                .map(|o| o + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let private = rng.random::<f64>() < self.spec.private_fraction;
            let id = self.point_id(agent_id, round, idx);
            let target = self.oracle_value(&features, round)
                + self.noise_for(id, self.spec.n_actions as u64);
            points.push(DataPoint {
                id,
                modality: idx % self.spec.n_modalities,
                features,
                target,
                flags: PointFlags {
                    outdated_after,
                    private,
                    irrelevant: false,
                },
                created_round: round,
            });
        }

        let mut successors = BTreeMap::new();
        if self.spec.chain_len > 1 {
            for chain in points.chunks(self.spec.chain_len) {
                for pair in chain.windows(2) {
                    successors.insert(pair[0].id, pair[1].id);
                }
            }
        }

        for p in &points {
            self.archive.insert(p.id, p.clone());
        }
        self.successors.extend(successors.iter());

        StreamBatch {
            points,
            successors,
            round,
        }
    }

    /// Fixed held-out pool drawn from the current-regime distribution. The
    /// per-point noise is keyed independently of the round, so pools before
    /// and after drift share features and noise and differ only through the
    /// regime's oracle values.
    pub fn validation_pool(&self, round: u32) -> StreamBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed ^ TAG_VAL, 0, 0));
        let mut points = Vec::with_capacity(VALIDATION_POOL_SIZE);
        for idx in 0..VALIDATION_POOL_SIZE {
            let features: Vec<f64> = (0..self.spec.n_features)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let id = (1u64 << 63) | idx as u64;
            let target =
                self.oracle_value(&features, round) + self.noise_for(id, self.spec.n_actions as u64);
            points.push(DataPoint {
                id,
                modality: idx % self.spec.n_modalities,
                features,
                target,
                flags: PointFlags::default(),
                created_round: round,
            });
        }
        StreamBatch {
            points,
            successors: BTreeMap::new(),
            round,
        }
    }

    /// The stored points for previously emitted ids, frozen as generated.
    /// Points stay available here even after agents purge them.
    pub fn forget_set(&self, ids: &BTreeSet<u64>) -> Result<StreamBatch> {
        let mut points = Vec::with_capacity(ids.len());
        for id in ids {
            match self.archive.get(id) {
                Some(p) => points.push(p.clone()),
                None => return Err(FramuError::UnknownId(*id)),
            }
        }
        Ok(StreamBatch {
            points,
            successors: BTreeMap::new(),
            round: 0,
        })
    }

    pub fn archive_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.archive.keys().copied()
    }

    pub fn archived_point(&self, id: u64) -> Option<&DataPoint> {
        self.archive.get(&id)
    }

    /// Transition source view for agents interacting with this environment.
    pub fn source(&self) -> EnvSource<'_> {
        EnvSource { env: self }
    }
}

/// Immutable view of the environment implementing the agent-facing
/// transition interface.
pub struct EnvSource<'a> {
    env: &'a Environment,
}

impl TransitionSource for EnvSource<'_> {
    fn step(&mut self, point: &DataPoint, action: usize) -> (f64, Option<DataPoint>) {
        let reward = self.env.reward(point, action);
        let next = self
            .env
            .successors
            .get(&point.id)
            .and_then(|id| self.env.archive.get(id))
            .cloned();
        (reward, next)
    }
}
