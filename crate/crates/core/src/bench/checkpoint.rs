//! Checkpoint files.
//!
//! `EBMMCKPT`, a little-endian u64 header length, a JSON header, then the
//! tensors as little-endian f64 in header order. Every floating-point
//! meta-parameter lives in the payload, so a save/load/save cycle is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyArch, EnergyModel, Param, ParameterSet};
use crate::metatrain::{MetaState, TrainConfig};
use crate::reader::ReadSchedule;
use crate::tape::Shape;
use crate::writer::WriteSchedule;

pub const MAGIC: [u8; 8] = *b"EBMMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` has {got} values, expected {expected}")]
    TensorLen { name: String, expected: usize, got: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    writable: bool,
    /// Offset in f64 units from the payload start.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    arch: EnergyArch,
    seed: u64,
    step: u64,
    write_steps: usize,
    write_layers: Vec<String>,
    grad_norm_term: bool,
    read_steps: usize,
    clamp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// A meta-state plus the training config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: MetaState,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(state: MetaState, train: Option<TrainConfig>) -> Self {
        Checkpoint { state, train }
    }

    pub fn model(&self) -> EnergyModel {
        self.state.model()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, writable: bool, data: &[f64]| {
            tensors.push(TensorEntry { name, shape, writable, offset: payload.len() });
            payload.extend_from_slice(data);
        };
        for p in s.params.iter() {
            push(format!("theta.{}", p.name), p.shape.dims().to_vec(), p.writable, &p.data);
        }
        push("write.rates_raw".into(), vec![s.write.rates_raw.len()], false, &s.write.rates_raw);
        push("write.alpha_raw".into(), vec![], false, &[s.write.alpha_raw]);
        push("write.beta_raw".into(), vec![], false, &[s.write.beta_raw]);
        push("read.gamma".into(), vec![], false, &[s.read.gamma_init]);
        push("read.decay_logits".into(), vec![s.read.decay_logits.len()], false, &s.read.decay_logits);
        push("read.momentum_logits".into(), vec![s.read.momentum_logits.len()], false, &s.read.momentum_logits);
        push("adam.m".into(), vec![s.m.len()], false, &s.m);
        push("adam.v".into(), vec![s.v.len()], false, &s.v);
        let header = Header {
            version: VERSION,
            arch: s.arch.clone(),
            seed: s.seed,
            step: s.step,
            write_steps: s.write.steps,
            write_layers: s.write.layers.clone(),
            grad_norm_term: s.write.grad_norm_term,
            read_steps: s.read.steps,
            clamp: s.read.clamp,
            train: self.train.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize.checked_add(len).ok_or(CheckpointError::Truncated)?;
        if bytes.len() < end {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[16..end])?;
        if header.version != VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let raw = &bytes[end..];
        if raw.len() % 8 != 0 {
            return Err(CheckpointError::Truncated);
        }
        let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut ends: Vec<usize> = header.tensors.iter().map(|t| t.offset).skip(1).collect();
        ends.push(payload.len());
        let mut table = std::collections::HashMap::new();
        for (t, &stop) in header.tensors.iter().zip(&ends) {
            let n: usize = t.shape.iter().product();
            if t.offset > stop || stop - t.offset != n || stop > payload.len() {
                return Err(CheckpointError::TensorLen {
                    name: t.name.clone(),
                    expected: n,
                    got: stop.saturating_sub(t.offset),
                });
            }
            table.insert(t.name.as_str(), (t, &payload[t.offset..stop]));
        }
        let get = |name: &str| table.get(name).map(|(_, d)| d.to_vec()).ok_or_else(|| CheckpointError::Missing(name.into()));
        let scalar = |name: &str| -> Result<f64> {
            let v = get(name)?;
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(CheckpointError::TensorLen { name: name.into(), expected: 1, got: v.len() }),
            }
        };

        let mut params = Vec::new();
        for t in header.tensors.iter().filter(|t| t.name.starts_with("theta.")) {
            let shape = Shape::from_dims(&t.shape).ok_or_else(|| CheckpointError::Header(format!("shape of {}", t.name)))?;
            params.push(Param {
                name: t.name["theta.".len()..].to_string(),
                shape,
                data: get(&t.name)?,
                writable: t.writable,
            });
        }
        let params = ParameterSet::new(params).map_err(|e| CheckpointError::Header(e.to_string()))?;
        EnergyModel::new(header.arch.clone()).check_params(&params).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let write = WriteSchedule {
            steps: header.write_steps,
            layers: header.write_layers,
            rates_raw: get("write.rates_raw")?,
            alpha_raw: scalar("write.alpha_raw")?,
            beta_raw: scalar("write.beta_raw")?,
            grad_norm_term: header.grad_norm_term,
        };
        write.validate(&params).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let read = ReadSchedule {
            steps: header.read_steps,
            gamma_init: scalar("read.gamma")?,
            decay_logits: get("read.decay_logits")?,
            momentum_logits: get("read.momentum_logits")?,
            clamp: header.clamp,
        };
        read.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut state = MetaState::from_parts(header.arch, params, write, read, header.seed);
        let n = state.m.len();
        for (name, slot) in [("adam.m", &mut state.m), ("adam.v", &mut state.v)] {
            let v = get(name)?;
            if v.len() != n {
                return Err(CheckpointError::TensorLen { name: name.into(), expected: n, got: v.len() });
            }
            *slot = v;
        }
        state.step = header.step;
        Ok(Checkpoint { state, train: header.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
