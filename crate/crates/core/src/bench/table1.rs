//! Retrieval error of binary patterns versus the number of stored patterns.
//!
//! Each trial draws `N` fresh uniform bipolar patterns, writes them, then
//! queries every stored pattern once with a distorted copy. Every method
//! sees the same patterns and queries for a given seed, size and trial.

use std::time::Instant;

use rayon::prelude::*;

use super::{streams, BenchError, Checkpoint, ExperimentConfig, Method, MetricsRecord, Result, Table};
use crate::hopfield::{self, HopfieldNet};
use crate::metatrain::{Episode, MetaState, TaskBatch};
use crate::patterns::{hamming, unit_to_bipolar, PatternBatch};
use crate::util::sub_rng;

/// Mean error for one (method, N) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub n: usize,
    pub trials: usize,
    /// Mean error bits per query.
    pub mean: f64,
    /// Fraction of Hopfield reads that stopped on an unchanged sweep.
    pub converged: f64,
    /// Largest energy change seen on any accepted Hopfield flip.
    pub max_energy_step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table1 {
    pub cells: Vec<Cell>,
    pub table: Table,
}

impl Table1 {
    pub fn cell(&self, method: Method, n: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.n == n)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Trial {
    pub error: f64,
    pub converged: usize,
    pub max_energy_step: f64,
    pub wall_ms: f64,
}

/// The task of trial `trial` at size `n`: patterns and their queries.
pub fn trial_task(cfg: &ExperimentConfig, n: usize, trial: u64) -> Result<(PatternBatch, TaskBatch)> {
    let mut rng = sub_rng(cfg.seed, streams::of(streams::PATTERNS, n), trial);
    let x = PatternBatch::random_bipolar(n, cfg.dim, &mut rng);
    let task = TaskBatch::distort(&x, &cfg.distortion(), &mut rng)?;
    Ok((x, task))
}

pub(crate) fn hopfield_trial(cfg: &ExperimentConfig, method: Method, n: usize, trial: u64) -> Result<Trial> {
    let start = Instant::now();
    let rule = method.rule().expect("Hopfield method");
    let (x, task) = trial_task(cfg, n, trial)?;
    let net: HopfieldNet = hopfield::write(rule, &x)?;
    let mut rng = sub_rng(cfg.seed, streams::of(streams::DYNAMICS, n), trial);
    let mut bits = 0;
    let mut converged = 0;
    let mut max_step = f64::NEG_INFINITY;
    for i in 0..n {
        let q: Vec<f64> = task.queries.row(i).iter().map(|&u| unit_to_bipolar(u)).collect();
        let clamp: Vec<bool> = task.masks[i].iter().map(|m| !m).collect();
        let r = hopfield::read(&net, &q, cfg.clamp.then_some(&clamp[..]), cfg.max_sweeps, &mut rng)?;
        bits += hamming(&r.state, x.row(i));
        converged += r.converged as usize;
        max_step = max_step.max(r.max_energy_step);
    }
    Ok(Trial {
        error: bits as f64 / n as f64,
        converged,
        max_energy_step: max_step,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn ebmm_trial(cfg: &ExperimentConfig, state: &MetaState, episode: &Episode, n: usize, trial: u64) -> Result<Trial> {
    let start = Instant::now();
    let (_, task) = trial_task(cfg, n, trial)?;
    let out = episode.evaluate(state, &task, cfg.precision)?;
    Ok(Trial {
        error: out.bit_error(&task),
        converged: n,
        max_energy_step: f64::NEG_INFINITY,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Run every configured (method, N) cell. `sink` receives one record per
/// trial, in trial order.
pub fn run_table1(
    cfg: &ExperimentConfig,
    ebmm: Option<&Checkpoint>,
    deterministic: bool,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Table1> {
    cfg.validate()?;
    let ebmm = match (cfg.methods.contains(&Method::Ebmm), ebmm) {
        (true, None) => return Err(BenchError::NoCheckpoint),
        (true, Some(c)) if c.state.arch.dim() != cfg.dim => {
            return Err(BenchError::CheckpointDim { expected: cfg.dim, got: c.state.arch.dim() });
        }
        (_, c) => c,
    };
    let mut header = vec!["method".to_string()];
    header.extend(cfg.sizes.iter().map(|n| n.to_string()));
    let mut table = Table::new(header);
    let mut cells = Vec::new();
    if cfg.trials == 0 {
        return Ok(Table1 { cells, table });
    }
    for &method in &cfg.methods {
        let mut row = vec![method.name().to_string()];
        for &n in &cfg.sizes {
            if method == Method::Pinv && n > cfg.dim {
                row.push(String::new());
                continue;
            }
            let (results, memory_size) = match method {
                Method::Ebmm => {
                    let ck = ebmm.expect("checked above");
                    let episode = Episode::new(&ck.state, n, cfg.clamp)?;
                    let r: Vec<Trial> = (0..cfg.trials as u64)
                        .into_par_iter()
                        .map(|t| ebmm_trial(cfg, &ck.state, &episode, n, t))
                        .collect::<Result<_>>()?;
                    (r, ck.state.params.memory_size())
                }
                _ => {
                    let r: Vec<Trial> = (0..cfg.trials as u64)
                        .into_par_iter()
                        .map(|t| hopfield_trial(cfg, method, n, t))
                        .collect::<Result<_>>()?;
                    (r, HopfieldNet::zeros(cfg.dim, method.rule().expect("rule")).parameter_budget())
                }
            };
            for (t, r) in results.iter().enumerate() {
                sink(&MetricsRecord {
                    trial: t as u64,
                    tag: method.name().to_string(),
                    n,
                    memory_size,
                    error: r.error,
                    wall_ms: (!deterministic).then_some(r.wall_ms),
                    ..Default::default()
                })?;
            }
            let mean = results.iter().map(|r| r.error).sum::<f64>() / results.len() as f64;
            let reads = (results.len() * n) as f64;
            let cell = Cell {
                method,
                n,
                trials: results.len(),
                mean,
                converged: results.iter().map(|r| r.converged).sum::<usize>() as f64 / reads,
                max_energy_step: results.iter().map(|r| r.max_energy_step).fold(f64::NEG_INFINITY, f64::max),
            };
            row.push(format!("{:.3}", cell.mean));
            cells.push(cell);
        }
        table.push(row);
    }
    Ok(Table1 { cells, table })
}
