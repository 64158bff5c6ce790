//! Simulation configuration: a flat key-value file with dotted keys
//! (`server.beta = 0.5`), TOML-compatible syntax.
//!
//! Unknown keys are hard errors; missing keys take the documented defaults,
//! so an empty file is the all-defaults configuration. Every key
//! round-trips losslessly through `serialize` / `parse_str`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::attention::Thresholds;
use crate::error::{FramuError, Result};
use crate::privacy::PrivacyConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub n_features: usize,
    pub n_actions: usize,
    pub n_modalities: usize,
    pub points_per_round: usize,
    pub chain_len: usize,
    pub noise_std: f64,
    pub true_param_scale: f64,
    pub private_fraction: f64,
    pub drift_round: Option<u32>,
    pub drift_features: Vec<usize>,
    pub irrelevant_features: Vec<usize>,
    pub non_iid: bool,
    pub shared_stream: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_agents: 5,
            n_features: 20,
            n_actions: 4,
            n_modalities: 4,
            points_per_round: 50,
            chain_len: 1,
            noise_std: 0.1,
            true_param_scale: 0.5,
            private_fraction: 0.0,
            drift_round: None,
            drift_features: Vec::new(),
            irrelevant_features: Vec::new(),
            non_iid: true,
            shared_stream: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub eta: f64,
    pub rho: f64,
    pub a_max: f64,
    pub thresholds: Thresholds,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            eta: 0.05,
            rho: 0.95,
            a_max: 1.0,
            thresholds: Thresholds {
                global_theta: 0.1,
                local_delta: 0.05,
                outdated_threshold: 1_000_000,
                irrelevant_threshold: 0.05,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    /// Fine-tune mixing factor toward the broadcast global model.
    pub beta: f64,
    /// Modality-scoped mixing factor applied after the fine-tune.
    pub lambda: f64,
    pub eps_converge: f64,
    pub alignment_weighting: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            beta: 0.5,
            lambda: 0.5,
            eps_converge: 1e-6,
            alignment_weighting: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IoConfig {
    /// Write a checkpoint every N completed rounds; 0 means final only.
    pub checkpoint_every: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub t_max: u32,
    pub steps_per_round: usize,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub attention: AttentionConfig,
    pub server: ServerConfig,
    pub privacy: PrivacyConfig,
    pub io: IoConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            t_max: 15,
            steps_per_round: 200,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            attention: AttentionConfig::default(),
            server: ServerConfig::default(),
            privacy: PrivacyConfig::default(),
            io: IoConfig::default(),
        }
    }
}

fn cfg_err(key: &str, message: impl Into<String>) -> FramuError {
    FramuError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(cfg_err(key, "expected a number")),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(cfg_err(key, "expected a non-negative integer")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    Ok(as_u64(key, v)? as usize)
}

fn as_u32(key: &str, v: &toml::Value) -> Result<u32> {
    let n = as_u64(key, v)?;
    u32::try_from(n).map_err(|_| cfg_err(key, "value too large"))
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    match v {
        toml::Value::Boolean(b) => Ok(*b),
        _ => Err(cfg_err(key, "expected true or false")),
    }
}

fn as_index_list(key: &str, v: &toml::Value) -> Result<Vec<usize>> {
    match v {
        toml::Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        _ => Err(cfg_err(key, "expected an array of indices")),
    }
}

fn unit_interval(key: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(cfg_err(key, format!("{} outside [0, 1]", v)))
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(cfg_err(key, format!("{} must be strictly positive", v)))
    }
}

fn non_negative(key: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(cfg_err(key, format!("{} must be non-negative", v)))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(cfg_err(key, "must be at least 1"))
    }
}

/// Apply one `key = value` assignment onto a config. Shared by the file
/// parser and the sweep machinery, so range violations always name the key.
pub fn set_key(cfg: &mut SimConfig, key: &str, value: &toml::Value) -> Result<()> {
    match key {
        "seed" => cfg.seed = as_u64(key, value)?,
        "t_max" => cfg.t_max = as_u32(key, value).and_then(|v| {
            if v >= 1 { Ok(v) } else { Err(cfg_err(key, "must be at least 1")) }
        })?,
        "steps_per_round" => cfg.steps_per_round = as_usize(key, value)?,

        "env.n_agents" => cfg.env.n_agents = at_least_one(key, as_usize(key, value)?)?,
        "env.n_features" => cfg.env.n_features = at_least_one(key, as_usize(key, value)?)?,
        "env.n_actions" => cfg.env.n_actions = at_least_one(key, as_usize(key, value)?)?,
        "env.n_modalities" => cfg.env.n_modalities = at_least_one(key, as_usize(key, value)?)?,
        "env.points_per_round" => {
            cfg.env.points_per_round = at_least_one(key, as_usize(key, value)?)?
        }
        "env.chain_len" => cfg.env.chain_len = at_least_one(key, as_usize(key, value)?)?,
        "env.noise_std" => cfg.env.noise_std = non_negative(key, as_f64(key, value)?)?,
        "env.true_param_scale" => {
            cfg.env.true_param_scale = positive(key, as_f64(key, value)?)?
        }
        "env.private_fraction" => {
            cfg.env.private_fraction = unit_interval(key, as_f64(key, value)?)?
        }
        "env.drift_round" => cfg.env.drift_round = Some(as_u32(key, value)?),
        "env.drift_features" => cfg.env.drift_features = as_index_list(key, value)?,
        "env.irrelevant_features" => cfg.env.irrelevant_features = as_index_list(key, value)?,
        "env.non_iid" => cfg.env.non_iid = as_bool(key, value)?,
        "env.shared_stream" => cfg.env.shared_stream = as_bool(key, value)?,

        "agent.lr" => cfg.agent.lr = positive(key, as_f64(key, value)?)?,
        "agent.gamma" => {
            let g = unit_interval(key, as_f64(key, value)?)?;
            if g >= 1.0 {
                return Err(cfg_err(key, "gamma must be strictly below 1"));
            }
            cfg.agent.gamma = g;
        }
        "agent.epsilon_greedy" => {
            cfg.agent.epsilon_greedy = unit_interval(key, as_f64(key, value)?)?
        }
        "agent.epsilon_decay" => {
            let d = as_f64(key, value)?;
            if !(d > 0.0 && d <= 1.0) {
                return Err(cfg_err(key, "epsilon_decay must be in (0, 1]"));
            }
            cfg.agent.epsilon_decay = d;
        }
        "agent.epsilon_floor" => {
            cfg.agent.epsilon_floor = unit_interval(key, as_f64(key, value)?)?
        }
        "agent.local_unlearn" => cfg.agent.local_unlearn = as_bool(key, value)?,

        "attention.eta" => cfg.attention.eta = non_negative(key, as_f64(key, value)?)?,
        "attention.rho" => {
            let r = as_f64(key, value)?;
            if !(r > 0.0 && r <= 1.0) {
                return Err(cfg_err(key, "rho must be in (0, 1]"));
            }
            cfg.attention.rho = r;
        }
        "attention.a_max" => cfg.attention.a_max = positive(key, as_f64(key, value)?)?,
        "attention.theta" => {
            cfg.attention.thresholds.global_theta = positive(key, as_f64(key, value)?)?
        }
        "attention.local_delta" => {
            cfg.attention.thresholds.local_delta = positive(key, as_f64(key, value)?)?;
            cfg.agent.local_delta = cfg.attention.thresholds.local_delta;
        }
        "attention.outdated_threshold" => {
            let v = as_u32(key, value)?;
            if v == 0 {
                return Err(cfg_err(key, "must be at least 1"));
            }
            cfg.attention.thresholds.outdated_threshold = v;
        }
        "attention.irrelevant_threshold" => {
            cfg.attention.thresholds.irrelevant_threshold =
                positive(key, as_f64(key, value)?)?
        }

        "server.beta" => cfg.server.beta = unit_interval(key, as_f64(key, value)?)?,
        "server.lambda" => cfg.server.lambda = unit_interval(key, as_f64(key, value)?)?,
        "server.eps_converge" => {
            cfg.server.eps_converge = positive(key, as_f64(key, value)?)?
        }
        "server.alignment_weighting" => {
            cfg.server.alignment_weighting = as_bool(key, value)?
        }

        "privacy.enabled" => cfg.privacy.enabled = as_bool(key, value)?,
        "privacy.epsilon" => cfg.privacy.epsilon = positive(key, as_f64(key, value)?)?,
        "privacy.clip_norm" => cfg.privacy.clip_norm = positive(key, as_f64(key, value)?)?,

        "io.checkpoint_every" => cfg.io.checkpoint_every = as_u32(key, value)?,

        _ => return Err(cfg_err(key, "unknown key")),
    }
    Ok(())
}

/// Apply a raw textual value (as given on a sweep command line) to a key.
pub fn set_key_str(cfg: &mut SimConfig, key: &str, raw: &str) -> Result<()> {
    let table: toml::Table = format!("v = {}", raw.trim())
        .parse()
        .map_err(|e: toml::de::Error| cfg_err(key, format!("unparseable value {:?}: {}", raw, e)))?;
    set_key(cfg, key, &table["v"])
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{}.{}", prefix, k)
        };
        match v {
            toml::Value::Table(inner) => flatten(&path, inner, out),
            other => {
                out.insert(path, other.clone());
            }
        }
    }
}

/// Parse a config from text. Unknown keys are hard errors; parse errors keep
/// the line/column information of the underlying reader.
pub fn parse_str(text: &str) -> Result<SimConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| FramuError::ConfigParse(e.to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    let mut cfg = SimConfig::default();
    for (key, value) in &flat {
        set_key(&mut cfg, key, value)?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FramuError::io(path, e))?;
    parse_str(&text)
}

/// Cross-field checks that single-key setters cannot express.
pub fn validate(cfg: &SimConfig) -> Result<()> {
    if cfg.env.n_modalities > cfg.env.n_features {
        return Err(cfg_err(
            "env.n_modalities",
            "cannot exceed env.n_features",
        ));
    }
    for &i in cfg.env.drift_features.iter().chain(&cfg.env.irrelevant_features) {
        if i >= cfg.env.n_features {
            return Err(cfg_err(
                "env.drift_features",
                format!("feature index {} out of range", i),
            ));
        }
    }
    if cfg.env.drift_round.is_some() && cfg.env.drift_features.is_empty() {
        return Err(cfg_err(
            "env.drift_features",
            "drift_round set but no features to flip",
        ));
    }
    cfg.attention.thresholds.validate()?;
    Ok(())
}

fn fmt_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        format!("{}", v)
    }
}

fn fmt_list(items: &[usize]) -> String {
    let inner: Vec<String> = items.iter().map(|i| i.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

/// Canonical textual form: every key in a fixed order. `parse_str` of the
/// output reproduces the config exactly.
pub fn serialize(cfg: &SimConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{} = {}", k, v);
    };
    kv("seed", cfg.seed.to_string());
    kv("t_max", cfg.t_max.to_string());
    kv("steps_per_round", cfg.steps_per_round.to_string());

    kv("env.n_agents", cfg.env.n_agents.to_string());
    kv("env.n_features", cfg.env.n_features.to_string());
    kv("env.n_actions", cfg.env.n_actions.to_string());
    kv("env.n_modalities", cfg.env.n_modalities.to_string());
    kv("env.points_per_round", cfg.env.points_per_round.to_string());
    kv("env.chain_len", cfg.env.chain_len.to_string());
    kv("env.noise_std", fmt_float(cfg.env.noise_std));
    kv("env.true_param_scale", fmt_float(cfg.env.true_param_scale));
    kv("env.private_fraction", fmt_float(cfg.env.private_fraction));
    if let Some(r) = cfg.env.drift_round {
        kv("env.drift_round", r.to_string());
    }
    if !cfg.env.drift_features.is_empty() {
        kv("env.drift_features", fmt_list(&cfg.env.drift_features));
    }
    if !cfg.env.irrelevant_features.is_empty() {
        kv("env.irrelevant_features", fmt_list(&cfg.env.irrelevant_features));
    }
    kv("env.non_iid", cfg.env.non_iid.to_string());
    kv("env.shared_stream", cfg.env.shared_stream.to_string());

    kv("agent.lr", fmt_float(cfg.agent.lr));
    kv("agent.gamma", fmt_float(cfg.agent.gamma));
    kv("agent.epsilon_greedy", fmt_float(cfg.agent.epsilon_greedy));
    kv("agent.epsilon_decay", fmt_float(cfg.agent.epsilon_decay));
    kv("agent.epsilon_floor", fmt_float(cfg.agent.epsilon_floor));
    kv("agent.local_unlearn", cfg.agent.local_unlearn.to_string());

    kv("attention.eta", fmt_float(cfg.attention.eta));
    kv("attention.rho", fmt_float(cfg.attention.rho));
    kv("attention.a_max", fmt_float(cfg.attention.a_max));
    kv("attention.theta", fmt_float(cfg.attention.thresholds.global_theta));
    kv("attention.local_delta", fmt_float(cfg.attention.thresholds.local_delta));
    kv(
        "attention.outdated_threshold",
        cfg.attention.thresholds.outdated_threshold.to_string(),
    );
    kv(
        "attention.irrelevant_threshold",
        fmt_float(cfg.attention.thresholds.irrelevant_threshold),
    );

    kv("server.beta", fmt_float(cfg.server.beta));
    kv("server.lambda", fmt_float(cfg.server.lambda));
    kv("server.eps_converge", fmt_float(cfg.server.eps_converge));
    kv(
        "server.alignment_weighting",
        cfg.server.alignment_weighting.to_string(),
    );

    kv("privacy.enabled", cfg.privacy.enabled.to_string());
    kv("privacy.epsilon", fmt_float(cfg.privacy.epsilon));
    kv("privacy.clip_norm", fmt_float(cfg.privacy.clip_norm));

    kv("io.checkpoint_every", cfg.io.checkpoint_every.to_string());
    s
}

/// SHA-256 over the canonical serialization; guards checkpoint resumption
/// against config mismatches.
pub fn config_hash(cfg: &SimConfig) -> [u8; 32] {
    let digest = Sha256::digest(serialize(cfg).as_bytes());
    digest.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse_str("").unwrap(), SimConfig::default());
    }

    #[test]
    fn out_of_range_error_names_the_key() {
        let err = parse_str("server.beta = 1.5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("server.beta"), "{}", msg);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = parse_str("server.betaa = 0.5").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{}", err);
    }

    #[test]
    fn parse_error_carries_position() {
        let err = parse_str("server.beta ===").unwrap_err();
        assert!(matches!(err, FramuError::ConfigParse(_)));
        assert!(err.to_string().contains("line"), "{}", err);
    }

    #[test]
    fn serialize_round_trips_every_key() {
        let mut cfg = SimConfig::default();
        cfg.seed = 99;
        cfg.privacy.epsilon = 0.001;
        cfg.privacy.enabled = true;
        cfg.env.drift_round = Some(7);
        cfg.env.drift_features = vec![0, 3, 5];
        cfg.env.irrelevant_features = vec![18, 19];
        cfg.server.eps_converge = 1e-9;
        cfg.agent.lr = 0.025;
        cfg.attention.thresholds.outdated_threshold = 8;
        let text = serialize(&cfg);
        let back = parse_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_key_str_parses_raw_values() {
        let mut cfg = SimConfig::default();
        set_key_str(&mut cfg, "privacy.epsilon", "0.001").unwrap();
        assert_eq!(cfg.privacy.epsilon, 0.001);
        set_key_str(&mut cfg, "attention.rho", "1.0").unwrap();
        assert_eq!(cfg.attention.rho, 1.0);
        set_key_str(&mut cfg, "env.non_iid", "false").unwrap();
        assert!(!cfg.env.non_iid);
        assert!(set_key_str(&mut cfg, "no.such.key", "1").is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = SimConfig::default();
        let mut b = SimConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
