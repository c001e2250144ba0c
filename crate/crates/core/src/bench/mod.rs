//! Experiment harness: configuration, file formats and the benchmark runs
//! behind the command-line tool.

pub mod checkpoint;
pub mod gradcheck;
pub mod histogram;
pub mod metrics;
pub mod pset;
pub mod sweep;
pub mod table1;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distort::{DistortError, DistortionSpec};
use crate::energy::{EnergyArch, EnergyError};
use crate::hopfield::{HopfieldError, Rule};
use crate::metatrain::{BinarySource, MetaError, PatternSource, SetSource, TrainConfig};
use crate::patterns::Domain;
use crate::reader::ReadError;
use crate::tape::{Precision, TapeError};
use crate::writer::WriteError;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use metrics::{JsonLines, MetricsRecord, Table};
pub use pset::PsetError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("method `ebmm` needs a checkpoint")]
    NoCheckpoint,
    #[error("checkpoint has dimension {got}, experiment uses {expected}")]
    CheckpointDim { expected: usize, got: usize },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pset(#[from] PsetError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Hopfield(#[from] HopfieldError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Write(#[from] WriteError),
    #[error(transparent)]
    Distort(#[from] DistortError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Table1,
    Train,
    Eval,
    EnergyHist,
    Gradcheck,
}

/// A memory: one of the Hopfield rules or a meta-learned energy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hebb,
    Storkey,
    Pinv,
    Ebmm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hebb => "hebb",
            Method::Storkey => "storkey",
            Method::Pinv => "pinv",
            Method::Ebmm => "ebmm",
        }
    }

    pub fn rule(self) -> Option<Rule> {
        match self {
            Method::Hebb => Some(Rule::Hebb),
            Method::Storkey => Some(Rule::Storkey),
            Method::Pinv => Some(Rule::Pinv),
            Method::Ebmm => None,
        }
    }
}

/// One experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Trials per table cell, or evaluation batches per memory size.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Numbers of stored patterns.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Query distortion; defaults to redrawing half the bits at random.
    #[serde(default)]
    pub distortion: Option<DistortionSpec>,
    /// Hold undistorted coordinates at their true values while reading.
    #[serde(default = "default_true")]
    pub clamp: bool,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    /// Meta-training parameters for `train`.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Trained models for `eval`, `energy-hist` and the `ebmm` method; in
    /// `train` mode the first one is resumed.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    /// PSET file to draw patterns from instead of random bipolar vectors.
    #[serde(default)]
    pub patterns: Option<PathBuf>,
    /// Patterns written per batch for meta-learned models; defaults to the
    /// checkpoint's training batch.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Energy model for `gradcheck`.
    #[serde(default)]
    pub arch: Option<EnergyArch>,
    /// Save a checkpoint every this many meta-steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_trials() -> usize {
    1000
}

fn default_dim() -> usize {
    128
}

fn default_sizes() -> Vec<usize> {
    vec![16, 32, 48, 64, 96]
}

fn default_methods() -> Vec<Method> {
    vec![Method::Hebb, Method::Storkey, Method::Pinv]
}

fn default_true() -> bool {
    true
}

fn default_sweeps() -> usize {
    100
}

impl ExperimentConfig {
    /// Defaults for `mode`.
    pub fn new(mode: Mode) -> Self {
        serde_json::from_value(serde_json::json!({ "mode": mode })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The query distortion, defaulting to `⌊d/2⌋` randomly redrawn bits.
    pub fn distortion(&self) -> DistortionSpec {
        self.distortion.unwrap_or_else(|| DistortionSpec::randomize(self.dim / 2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(BenchError::Config("dim must be positive".into()));
        }
        if self.sizes.contains(&0) {
            return Err(BenchError::Config("sizes must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(BenchError::Config("max_sweeps must be positive".into()));
        }
        if self.batch == Some(0) {
            return Err(BenchError::Config("batch must be positive".into()));
        }
        match self.mode {
            Mode::Table1 => {
                self.distortion().validate(self.dim, Domain::Bipolar)?;
                if self.methods.contains(&Method::Ebmm) && self.checkpoints.is_empty() {
                    return Err(BenchError::NoCheckpoint);
                }
            }
            Mode::Train => {
                let t = self.train.as_ref().ok_or_else(|| BenchError::Config("train mode needs `train`".into()))?;
                t.validate()?;
            }
            Mode::Eval => {
                if self.methods.contains(&Method::Ebmm) && self.checkpoints.is_empty() {
                    return Err(BenchError::NoCheckpoint);
                }
            }
            Mode::EnergyHist => {
                if self.checkpoints.is_empty() {
                    return Err(BenchError::NoCheckpoint);
                }
            }
            Mode::Gradcheck => {
                if let Some(a) = &self.arch {
                    a.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Pattern source: the PSET file if configured, random bipolar
    /// patterns of dimension `dim` otherwise.
    pub fn source(&self, dim: usize) -> Result<Box<dyn PatternSource>> {
        match &self.patterns {
            Some(p) => {
                let set = pset::load(p)?;
                if set.dim() != dim {
                    return Err(BenchError::CheckpointDim { expected: set.dim(), got: dim });
                }
                Ok(Box::new(SetSource { set }))
            }
            None => Ok(Box::new(BinarySource { dim })),
        }
    }
}

/// Random stream tags, kept distinct across runs of one seed.
pub(crate) mod streams {
    pub const PATTERNS: u64 = 0x10;
    pub const DYNAMICS: u64 = 0x11;
    pub const EVAL: u64 = 0x20;
    pub const HIST: u64 = 0x30;
    pub const GRADCHECK: u64 = 0x40;

    /// A stream per (tag, size).
    pub fn of(tag: u64, size: usize) -> u64 {
        tag << 32 | size as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_json(r#"{"mode":"table1","bogus":1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn defaults() {
        let c = ExperimentConfig::from_json(r#"{"mode":"table1"}"#).unwrap();
        assert_eq!(c, ExperimentConfig::new(Mode::Table1));
        assert_eq!(c.dim, 128);
        assert_eq!(c.distortion(), DistortionSpec::randomize(64));
        assert!(c.clamp);
    }

    #[test]
    fn ebmm_needs_checkpoint() {
        let r = ExperimentConfig::from_json(r#"{"mode":"table1","methods":["ebmm"]}"#);
        assert!(matches!(r, Err(BenchError::NoCheckpoint)));
        let r = ExperimentConfig::from_json(r#"{"mode":"train"}"#);
        assert!(matches!(r, Err(BenchError::Config(_))));
    }
}
