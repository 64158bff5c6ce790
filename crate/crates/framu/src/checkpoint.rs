//! Versioned binary checkpoint container.
//!
//! Layout, all fields little-endian, in order:
//!
//! ```text
//! magic            4 bytes  "FRMU"
//! format_version   u32
//! config_hash      32 bytes (SHA-256 of the canonical config serialization)
//! round            u32      completed rounds
//! global_params    ParamVector
//! perf_history     u32 len, then len f64
//! tombstones       u32 len, then len u64
//! total_points     u64
//! queued_unlearn   u32 len, then len u64
//! privacy_rngs     u32 len, then len RngState
//! agents           u32 len, then len AgentRecord
//!
//! ParamVector  = n_actions u32, n_features u32, n_actions*n_features f64
//! RngState     = seed 32 bytes, word_pos u128 (16 bytes)
//! AgentRecord  = agent_id u32, epsilon f64, unknown_warnings u64, RngState,
//!                params ParamVector, initial_params ParamVector,
//!                replay (u32 len + u64s), attention (u32 len + (u64, f64)s),
//!                dataset (u32 len + DataPoints), ledger (u32 len + (u64 +
//!                ParamVector)s)
//! DataPoint    = id u64, modality u32, created_round u32,
//!                outdated flag u8 + value u32, private u8, irrelevant u8,
//!                target f64, u32 len + features f64
//! ```
//!
//! Environment state is not stored: generation is pure in (seed, agent,
//! round), so resume replays the archive from the config.

use std::path::Path;

use crate::error::{FramuError, Result};
use crate::model::{DataPoint, ParamVector, PointFlags};

pub const MAGIC: &[u8; 4] = b"FRMU";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent_id: u32,
    pub epsilon: f64,
    pub unknown_unlearn_warnings: u64,
    pub rng: RngState,
    pub params: ParamVector,
    pub initial_params: ParamVector,
    pub replay: Vec<u64>,
    pub attention: Vec<(u64, f64)>,
    pub dataset: Vec<DataPoint>,
    pub ledger: Vec<(u64, ParamVector)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: [u8; 32],
    pub round: u32,
    pub global_params: ParamVector,
    pub perf_history: Vec<f64>,
    pub tombstones: Vec<u64>,
    pub total_points: u64,
    pub queued_unlearn: Vec<u64>,
    pub privacy_rngs: Vec<RngState>,
    pub agents: Vec<AgentRecord>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn params(&mut self, p: &ParamVector) {
        self.u32(p.n_actions() as u32);
        self.u32(p.n_features() as u32);
        for v in p.values() {
            self.f64(*v);
        }
    }

    fn rng(&mut self, r: &RngState) {
        self.bytes(&r.seed);
        self.u128(r.word_pos);
    }

    fn point(&mut self, p: &DataPoint) {
        self.u64(p.id);
        self.u32(p.modality as u32);
        self.u32(p.created_round);
        match p.flags.outdated_after {
            Some(r) => {
                self.u8(1);
                self.u32(r);
            }
            None => {
                self.u8(0);
                self.u32(0);
            }
        }
        self.u8(p.flags.private as u8);
        self.u8(p.flags.irrelevant as u8);
        self.f64(p.target);
        self.u32(p.features.len() as u32);
        for v in &p.features {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FramuError::Checkpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn params(&mut self) -> Result<ParamVector> {
        let n_actions = self.u32()? as usize;
        let n_features = self.u32()? as usize;
        let mut values = Vec::with_capacity(n_actions * n_features);
        for _ in 0..n_actions * n_features {
            values.push(self.f64()?);
        }
        ParamVector::from_values(values, n_actions, n_features)
            .map_err(|e| FramuError::Checkpoint(format!("bad params: {}", e)))
    }

    fn rng(&mut self) -> Result<RngState> {
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let word_pos = self.u128()?;
        Ok(RngState { seed, word_pos })
    }

    fn point(&mut self) -> Result<DataPoint> {
        let id = self.u64()?;
        let modality = self.u32()? as usize;
        let created_round = self.u32()?;
        let has_outdated = self.u8()? == 1;
        let outdated_value = self.u32()?;
        let private = self.u8()? == 1;
        let irrelevant = self.u8()? == 1;
        let target = self.f64()?;
        let n = self.u32()? as usize;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            features.push(self.f64()?);
        }
        Ok(DataPoint {
            id,
            modality,
            features,
            target,
            flags: PointFlags {
                outdated_after: has_outdated.then_some(outdated_value),
                private,
                irrelevant,
            },
            created_round,
        })
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(ckpt.format_version);
    w.bytes(&ckpt.config_hash);
    w.u32(ckpt.round);
    w.params(&ckpt.global_params);
    w.u32(ckpt.perf_history.len() as u32);
    for v in &ckpt.perf_history {
        w.f64(*v);
    }
    w.u32(ckpt.tombstones.len() as u32);
    for v in &ckpt.tombstones {
        w.u64(*v);
    }
    w.u64(ckpt.total_points);
    w.u32(ckpt.queued_unlearn.len() as u32);
    for v in &ckpt.queued_unlearn {
        w.u64(*v);
    }
    w.u32(ckpt.privacy_rngs.len() as u32);
    for r in &ckpt.privacy_rngs {
        w.rng(r);
    }
    w.u32(ckpt.agents.len() as u32);
    for a in &ckpt.agents {
        w.u32(a.agent_id);
        w.f64(a.epsilon);
        w.u64(a.unknown_unlearn_warnings);
        w.rng(&a.rng);
        w.params(&a.params);
        w.params(&a.initial_params);
        w.u32(a.replay.len() as u32);
        for id in &a.replay {
            w.u64(*id);
        }
        w.u32(a.attention.len() as u32);
        for (id, s) in &a.attention {
            w.u64(*id);
            w.f64(*s);
        }
        w.u32(a.dataset.len() as u32);
        for p in &a.dataset {
            w.point(p);
        }
        w.u32(a.ledger.len() as u32);
        for (id, c) in &a.ledger {
            w.u64(*id);
            w.params(c);
        }
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(FramuError::Checkpoint("bad magic".into()));
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(FramuError::Checkpoint(format!(
            "unsupported format version {}",
            format_version
        )));
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let round = r.u32()?;
    let global_params = r.params()?;
    let n = r.u32()? as usize;
    let mut perf_history = Vec::with_capacity(n);
    for _ in 0..n {
        perf_history.push(r.f64()?);
    }
    let n = r.u32()? as usize;
    let mut tombstones = Vec::with_capacity(n);
    for _ in 0..n {
        tombstones.push(r.u64()?);
    }
    let total_points = r.u64()?;
    let n = r.u32()? as usize;
    let mut queued_unlearn = Vec::with_capacity(n);
    for _ in 0..n {
        queued_unlearn.push(r.u64()?);
    }
    let n = r.u32()? as usize;
    let mut privacy_rngs = Vec::with_capacity(n);
    for _ in 0..n {
        privacy_rngs.push(r.rng()?);
    }
    let n = r.u32()? as usize;
    let mut agents = Vec::with_capacity(n);
    for _ in 0..n {
        let agent_id = r.u32()?;
        let epsilon = r.f64()?;
        let unknown_unlearn_warnings = r.u64()?;
        let rng = r.rng()?;
        let params = r.params()?;
        let initial_params = r.params()?;
        let k = r.u32()? as usize;
        let mut replay = Vec::with_capacity(k);
        for _ in 0..k {
            replay.push(r.u64()?);
        }
        let k = r.u32()? as usize;
        let mut attention = Vec::with_capacity(k);
        for _ in 0..k {
            let id = r.u64()?;
            let s = r.f64()?;
            attention.push((id, s));
        }
        let k = r.u32()? as usize;
        let mut dataset = Vec::with_capacity(k);
        for _ in 0..k {
            dataset.push(r.point()?);
        }
        let k = r.u32()? as usize;
        let mut ledger = Vec::with_capacity(k);
        for _ in 0..k {
            let id = r.u64()?;
            let c = r.params()?;
            ledger.push((id, c));
        }
        agents.push(AgentRecord {
            agent_id,
            epsilon,
            unknown_unlearn_warnings,
            rng,
            params,
            initial_params,
            replay,
            attention,
            dataset,
            ledger,
        });
    }
    if r.pos != bytes.len() {
        return Err(FramuError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        format_version,
        config_hash,
        round,
        global_params,
        perf_history,
        tombstones,
        total_points,
        queued_unlearn,
        privacy_rngs,
        agents,
    })
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_file(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    crate::commands::atomic_write(path, &bytes)
}

pub fn read_file(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| FramuError::io(path, e))?;
    decode(&bytes)
}
