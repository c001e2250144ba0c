//! Distortion-rate sweeps: retrieval error as a function of memory size.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean, percentile};
use super::table1::hopfield_trial;
use super::{streams, Checkpoint, ExperimentConfig, Method, MetricsRecord, Result};
use crate::hopfield::HopfieldNet;
use crate::metatrain::{sample_task, Episode};
use crate::patterns::Domain;

/// Error statistics for one memory size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub tag: String,
    pub n: usize,
    pub memory_size: usize,
    pub batches: usize,
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
}

fn summarize(tag: &str, n: usize, memory_size: usize, errors: &[f64]) -> RateSummary {
    RateSummary {
        tag: tag.to_string(),
        n,
        memory_size,
        batches: errors.len(),
        mean: mean(errors),
        p5: percentile(errors, 5.0),
        p95: percentile(errors, 95.0),
    }
}

/// Evaluate each configured Hopfield rule at every size in `cfg.sizes`, and
/// each checkpoint at its batch size, over `cfg.trials` batches. `sink`
/// receives one record per batch.
pub fn run_distortion_rate(
    cfg: &ExperimentConfig,
    checkpoints: &[Checkpoint],
    deterministic: bool,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<RateSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &method in cfg.methods.iter().filter(|m| **m != Method::Ebmm) {
        let budget = HopfieldNet::zeros(cfg.dim, method.rule().expect("rule")).parameter_budget();
        for &n in &cfg.sizes {
            if method == Method::Pinv && n > cfg.dim {
                continue;
            }
            let trials: Vec<_> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| hopfield_trial(cfg, method, n, t))
                .collect::<Result<_>>()?;
            for (t, r) in trials.iter().enumerate() {
                sink(&MetricsRecord {
                    trial: t as u64,
                    tag: method.name().into(),
                    n,
                    memory_size: budget,
                    error: r.error,
                    wall_ms: (!deterministic).then_some(r.wall_ms),
                    ..Default::default()
                })?;
            }
            let errors: Vec<f64> = trials.iter().map(|r| r.error).collect();
            out.push(summarize(method.name(), n, budget, &errors));
        }
    }
    if cfg.methods.contains(&Method::Ebmm) {
        for ck in checkpoints {
            out.push(evaluate_checkpoint(cfg, ck, deterministic, &mut sink)?);
        }
    }
    Ok(out)
}

/// Batch size, distortion and clamping for evaluating `ck`: the config's
/// explicit values first, then the checkpoint's training setup.
pub fn eval_setup(cfg: &ExperimentConfig, ck: &Checkpoint) -> (usize, crate::distort::DistortionSpec, bool) {
    let train = ck.train.as_ref();
    let batch = cfg.batch.or(train.map(|t| t.batch)).unwrap_or(1);
    let spec = cfg
        .distortion
        .or(train.map(|t| t.distortion))
        .unwrap_or_else(|| crate::distort::DistortionSpec::randomize(ck.state.arch.dim() / 2));
    let clamp = train.map_or(cfg.clamp, |t| t.clamp);
    (batch, spec, clamp)
}

fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    deterministic: bool,
    sink: &mut impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RateSummary> {
    let dim = ck.state.arch.dim();
    let (batch, spec, clamp) = eval_setup(cfg, ck);
    let mut source = cfg.source(dim)?;
    let domain = source.domain();
    let episode = Episode::new(&ck.state, batch, clamp)?;
    let memory_size = ck.state.params.memory_size();
    let stream = streams::of(streams::EVAL, batch);
    let mut errors = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials as u64 {
        let start = Instant::now();
        let task = sample_task(source.as_mut(), batch, &spec, cfg.seed, stream, t)?;
        let o = episode.evaluate(&ck.state, &task, cfg.precision)?;
        let error = match domain {
            Domain::Bipolar => o.bit_error(&task),
            Domain::UnitBox => o.final_error,
        };
        sink(&MetricsRecord {
            trial: t,
            tag: Method::Ebmm.name().into(),
            n: batch,
            memory_size,
            error,
            wall_ms: (!deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
            ..Default::default()
        })?;
        errors.push(error);
    }
    Ok(summarize(Method::Ebmm.name(), batch, memory_size, &errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Mode;

    #[test]
    fn single_trial_single_size() {
        let mut cfg = ExperimentConfig::new(Mode::Eval);
        cfg.trials = 1;
        cfg.dim = 16;
        cfg.sizes = vec![2];
        cfg.methods = vec![Method::Hebb];
        let mut n = 0;
        let s = run_distortion_rate(&cfg, &[], true, |_| Ok(n += 1)).unwrap();
        assert_eq!(n, 1);
        assert_eq!(s.len(), 1);
        assert!(s[0].p5 <= s[0].mean && s[0].mean <= s[0].p95);
    }
}
