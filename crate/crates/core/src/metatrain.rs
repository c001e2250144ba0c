//! Meta-learning of the prior parameters, the read and write schedules and
//! the writing-loss weights by differentiating the reconstruction loss
//! through an unrolled write followed by unrolled reads.

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distort::{DistortError, DistortionSpec};
use crate::energy::{build, EnergyArch, EnergyError, EnergyModel, ParameterSet};
use crate::patterns::{hamming, unit_to_bipolar, Domain, PatternBatch, PatternError};
use crate::reader::{read_expr, ReadError, ReadSchedule};
use crate::tape::{Array, Binding, Builder, Graph, NodeId, Plan, Precision, Shape, TapeError};
use crate::util::{sigmoid, softplus, softplus_inv, sub_rng};
use crate::writer::{write_expr, WriteError, WriteSchedule};

#[derive(Debug, Error, PartialEq)]
pub enum MetaError {
    #[error("task has {got} patterns, episode expects {expected}")]
    BatchSize { expected: usize, got: usize },
    #[error("pattern dimension {got} does not match energy dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("trajectory {index} has {got} iterates, expected {expected}")]
    TrajectoryLen { index: usize, expected: usize, got: usize },
    #[error("meta-state does not match the compiled episode")]
    StateMismatch,
    #[error("pattern source holds {available} patterns, {requested} requested")]
    Exhausted { available: usize, requested: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Write(#[from] WriteError),
    #[error(transparent)]
    Distort(#[from] DistortError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// AdamW with global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap.
    pub clip: f64,
    /// Learning-rate multiplier for step sizes, α, β and read logits.
    pub schedule_lr_scale: f64,
    /// From this step on every learning rate is multiplied by `decay_factor`; 0 disables.
    pub decay_after: u64,
    pub decay_factor: f64,
}

impl OptimConfig {
    /// Base learning rate in effect at `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_after > 0 && step >= self.decay_after {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 5e-5, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 0.05, schedule_lr_scale: 1.0, decay_after: 0, decay_factor: 0.1 }
    }
}

/// Scale `g` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Everything that is meta-learned, plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub arch: EnergyArch,
    /// Prior parameters `θ̄`.
    pub params: ParameterSet,
    pub write: WriteSchedule,
    pub read: ReadSchedule,
    /// Adam first and second moments, in [`MetaState::flatten`] order.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Applied updates.
    pub step: u64,
    pub seed: u64,
}

impl MetaState {
    /// Fresh state: He-initialised prior and default schedules.
    pub fn init(arch: &EnergyArch, write_steps: usize, read_steps: usize, seed: u64) -> Result<Self> {
        let (params, _) = build(arch, seed)?;
        let write = WriteSchedule::for_params(write_steps, &params);
        let read = ReadSchedule::new(read_steps);
        Ok(Self::from_parts(arch.clone(), params, write, read, seed))
    }

    pub fn from_parts(arch: EnergyArch, params: ParameterSet, write: WriteSchedule, read: ReadSchedule, seed: u64) -> Self {
        let mut s = MetaState { arch, params, write, read, m: Vec::new(), v: Vec::new(), step: 0, seed };
        let n = s.flatten().len();
        s.m = vec![0.0; n];
        s.v = vec![0.0; n];
        s
    }

    pub fn model(&self) -> EnergyModel {
        EnergyModel::new(self.arch.clone())
    }

    /// Names of the meta-parameter leaves, in [`MetaState::flatten`] order.
    /// Each entry is `(name, length)`.
    pub fn meta_layout(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self.params.iter().map(|p| (format!("theta.{}", p.name), p.data.len())).collect();
        let w = &self.write;
        for t in 0..w.steps {
            for l in 0..w.layers.len() {
                for term in crate::writer::TERMS {
                    out.push((WriteSchedule::rate_name(t, l, term), 1));
                }
            }
        }
        if w.grad_norm_term {
            out.push((WriteSchedule::ALPHA.to_string(), 1));
        }
        out.push((WriteSchedule::BETA.to_string(), 1));
        out.push((ReadSchedule::gamma_name().to_string(), 1));
        for k in 0..self.read.decay_logits.len() {
            out.push((ReadSchedule::decay_name(k), 1));
        }
        for k in 0..self.read.momentum_logits.len() {
            out.push((ReadSchedule::momentum_name(k), 1));
        }
        out
    }

    /// All meta-parameters as one vector. `γ¹` appears as its softplus
    /// pre-image.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.params.iter().flat_map(|p| p.data.iter().copied()).collect();
        v.extend(&self.write.rates_raw);
        if self.write.grad_norm_term {
            v.push(self.write.alpha_raw);
        }
        v.push(self.write.beta_raw);
        v.push(softplus_inv(self.read.gamma_init));
        v.extend(&self.read.decay_logits);
        v.extend(&self.read.momentum_logits);
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for p in self.params.iter_mut() {
            for x in p.data.iter_mut() {
                *x = it.next().expect("flat length");
            }
        }
        for x in self.write.rates_raw.iter_mut() {
            *x = it.next().expect("flat length");
        }
        if self.write.grad_norm_term {
            self.write.alpha_raw = it.next().expect("flat length");
        }
        self.write.beta_raw = it.next().expect("flat length");
        self.read.gamma_init = softplus(it.next().expect("flat length"));
        for x in self.read.decay_logits.iter_mut().chain(self.read.momentum_logits.iter_mut()) {
            *x = it.next().expect("flat length");
        }
    }

    /// Bind every meta-parameter leaf.
    pub fn bind(&self, b: &mut Binding) {
        self.params.bind(b, "theta");
        self.write.bind(b);
        self.read.bind(b);
    }
}

/// One meta-training task: patterns, their distortion masks and queries.
/// Targets and queries are in unit-box coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub targets: PatternBatch,
    pub masks: Vec<Vec<bool>>,
    pub queries: PatternBatch,
}

impl TaskBatch {
    /// Distort every pattern of `x` once.
    pub fn distort<R: RngCore + ?Sized>(x: &PatternBatch, spec: &DistortionSpec, rng: &mut R) -> Result<Self> {
        let mut masks = Vec::with_capacity(x.len());
        let mut queries = Vec::with_capacity(x.len());
        for row in x.rows() {
            let (q, m) = spec.distort(row, x.domain(), rng)?;
            queries.push(q);
            masks.push(m);
        }
        let q = PatternBatch::from_rows(x.domain(), &queries)?;
        Ok(TaskBatch { targets: x.to_unit_box(), masks, queries: q.to_unit_box() })
    }

    /// Bind the `x.i`, `q.i` and, when `clamped`, `m.i` inputs of an episode.
    pub fn bind(&self, b: &mut Binding, clamped: bool) {
        for i in 0..self.len() {
            b.set(format!("x.{i}"), Array::vector(self.targets.row(i).to_vec()));
            b.set(format!("q.{i}"), Array::vector(self.queries.row(i).to_vec()));
            if clamped {
                // 1 marks a known coordinate.
                let m = self.masks[i].iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
                b.set(format!("m.{i}"), Array::vector(m));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Where training and evaluation patterns come from.
pub trait PatternSource {
    fn dim(&self) -> usize;
    fn domain(&self) -> Domain;
    fn sample(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<PatternBatch>;
}

/// Uniform random bipolar patterns; never runs out.
#[derive(Clone, Debug)]
pub struct BinarySource {
    pub dim: usize,
}

impl PatternSource for BinarySource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn domain(&self) -> Domain {
        Domain::Bipolar
    }

    fn sample(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<PatternBatch> {
        Ok(PatternBatch::random_bipolar(n, self.dim, rng))
    }
}

/// Distinct rows drawn uniformly from a fixed set.
#[derive(Clone, Debug)]
pub struct SetSource {
    pub set: PatternBatch,
}

impl PatternSource for SetSource {
    fn dim(&self) -> usize {
        self.set.dim()
    }

    fn domain(&self) -> Domain {
        self.set.domain()
    }

    fn sample(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<PatternBatch> {
        if n > self.set.len() {
            return Err(MetaError::Exhausted { available: self.set.len(), requested: n });
        }
        let idx = index::sample(rng, self.set.len(), n).into_vec();
        Ok(self.set.select(&idx))
    }
}

/// `Σ_{k=1..K} (1/N) Σᵢ ‖xᵢ − xᵢᵏ‖²` for trajectories `x⁰..xᴷ`.
pub fn reconstruction_loss(targets: &PatternBatch, trajectories: &[Vec<Vec<f64>>]) -> Result<f64> {
    if trajectories.len() != targets.len() {
        return Err(MetaError::BatchSize { expected: targets.len(), got: trajectories.len() });
    }
    let k1 = trajectories.first().map_or(0, |t| t.len());
    let mut total = 0.0;
    for (index, (x, traj)) in targets.rows().zip(trajectories).enumerate() {
        if traj.len() != k1 || k1 == 0 {
            return Err(MetaError::TrajectoryLen { index, expected: k1.max(1), got: traj.len() });
        }
        for it in &traj[1..] {
            if it.len() != x.len() {
                return Err(MetaError::DimMismatch { expected: x.len(), got: it.len() });
            }
            total += x.iter().zip(it).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total / targets.len() as f64)
}

/// Output of one episode evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutput {
    /// Step-wise reconstruction loss summed over iterates.
    pub loss: f64,
    /// Final-iterate squared error, averaged over patterns.
    pub final_error: f64,
    /// Final iterates, unit-box coordinates.
    pub finals: Vec<Vec<f64>>,
    /// Meta-gradient in [`MetaState::flatten`] order; empty for forward-only runs.
    pub grad: Vec<f64>,
}

impl EpisodeOutput {
    /// Mean Hamming distance after thresholding finals at 0.5.
    pub fn bit_error(&self, task: &TaskBatch) -> f64 {
        let total: usize = task
            .targets
            .rows()
            .zip(&self.finals)
            .map(|(x, f)| {
                let a: Vec<f64> = x.iter().map(|&u| unit_to_bipolar(u)).collect();
                let b: Vec<f64> = f.iter().map(|&u| unit_to_bipolar(u)).collect();
                hamming(&a, &b)
            })
            .sum();
        total as f64 / task.len() as f64
    }
}

/// Nodes of the write-then-read computation.
#[derive(Clone, Debug)]
pub struct EpisodeNodes {
    /// Step-wise reconstruction loss.
    pub loss: NodeId,
    /// Final-iterate squared error.
    pub final_error: NodeId,
    pub finals: Vec<NodeId>,
    /// Meta-parameter leaves in [`MetaState::meta_layout`] order; the
    /// `γ¹` leaf is `γ¹` itself, not its softplus pre-image.
    pub leaves: Vec<NodeId>,
}

/// Append the episode for `batch` patterns. Inputs are `x.i` (targets),
/// `q.i` (queries), `m.i` (1 on known coordinates, when `clamped`) and the
/// meta-parameter leaves.
pub fn episode_expr(b: &mut Builder, state: &MetaState, batch: usize, clamped: bool) -> Result<EpisodeNodes> {
    if batch == 0 {
        return Err(MetaError::Write(WriteError::EmptyBatch));
    }
    let model = state.model();
    model.check_params(&state.params)?;
    state.write.validate(&state.params)?;
    state.read.validate()?;
    let d = model.dim();
    let mut xs = Vec::with_capacity(batch);
    let mut qs = Vec::with_capacity(batch);
    let mut ms = Vec::with_capacity(batch);
    for i in 0..batch {
        xs.push(b.input(&format!("x.{i}"), Shape::vector(d))?);
        qs.push(b.input(&format!("q.{i}"), Shape::vector(d))?);
        if clamped {
            ms.push(Some(b.input(&format!("m.{i}"), Shape::vector(d))?));
        } else {
            ms.push(None);
        }
    }
    let prior = state.params.declare(b, "theta")?;
    let wn = state.write.declare(b)?;
    let writable = state.params.writable_names();
    let written = write_expr(b, &model, &prior, &writable, &xs, &wn)?;
    let rn = state.read.declare(b)?;
    let inv_n = 1.0 / batch as f64;
    let mut loss = b.scalar(0.0);
    let mut final_error = b.scalar(0.0);
    let mut finals = Vec::with_capacity(batch);
    for i in 0..batch {
        let iterates = read_expr(b, &model, &written.params, qs[i], ms[i], &rn)?;
        for (k, &it) in iterates.iter().enumerate().skip(1) {
            let diff = b.sub(xs[i], it)?;
            let sq = b.sq_norm(diff);
            loss = b.add(loss, sq)?;
            if k == iterates.len() - 1 {
                final_error = b.add(final_error, sq)?;
            }
        }
        finals.push(*iterates.last().expect("x⁰ present"));
    }
    let loss = b.scale(inv_n, loss);
    let final_error = b.scale(inv_n, final_error);
    let leaves = state
        .meta_layout()
        .iter()
        .map(|(name, _)| b.input_id(name).ok_or_else(|| TapeError::UnknownInput(name.clone())))
        .collect::<std::result::Result<_, _>>()?;
    Ok(EpisodeNodes { loss, final_error, finals, leaves })
}

/// Compiled write-then-read computation with its meta-gradient.
pub struct Episode {
    batch: usize,
    dim: usize,
    clamped: bool,
    layout: Vec<(String, usize)>,
    gamma_slot: usize,
    graph: Graph,
    forward: Plan,
    full: Plan,
}

impl Episode {
    /// Compile for `batch` patterns and the schedule shapes of `state`.
    /// With `clamped`, coordinates outside each task mask are held fixed.
    pub fn new(state: &MetaState, batch: usize, clamped: bool) -> Result<Self> {
        let mut b = Builder::new();
        let e = episode_expr(&mut b, state, batch, clamped)?;
        let layout = state.meta_layout();
        let grads = b.grad(e.loss, &e.leaves)?;
        let gamma_slot = layout.iter().position(|(n, _)| n == ReadSchedule::gamma_name()).expect("gamma leaf");

        let mut outputs = vec![e.loss, e.final_error];
        outputs.extend(&e.finals);
        let n_fwd = outputs.len();
        outputs.extend(&grads);
        let graph = b.finish(outputs);
        let forward = Plan::new(&graph, &graph.outputs()[..n_fwd]);
        let full = Plan::new(&graph, graph.outputs());
        Ok(Episode { batch, dim: state.arch.dim(), clamped, layout, gamma_slot, graph, forward, full })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Nodes in the graph with gradients.
    pub fn size(&self) -> usize {
        self.full.len()
    }

    fn binding(&self, state: &MetaState, task: &TaskBatch, precision: Precision) -> Result<Binding> {
        if task.len() != self.batch {
            return Err(MetaError::BatchSize { expected: self.batch, got: task.len() });
        }
        if task.targets.dim() != self.dim || task.queries.dim() != self.dim {
            return Err(MetaError::DimMismatch { expected: self.dim, got: task.targets.dim() });
        }
        if state.meta_layout() != self.layout {
            return Err(MetaError::StateMismatch);
        }
        let mut b = Binding::new(precision);
        task.bind(&mut b, self.clamped);
        state.bind(&mut b);
        Ok(b)
    }

    fn unpack(&self, out: Vec<Array>, with_grad: bool, state: &MetaState) -> EpisodeOutput {
        let loss = out[0].item();
        let final_error = out[1].item();
        let finals = out[2..2 + self.batch].iter().map(|a| a.data.clone()).collect();
        let mut grad = Vec::new();
        if with_grad {
            for (i, a) in out[2 + self.batch..].iter().enumerate() {
                if i == self.gamma_slot {
                    // The leaf is γ¹ itself; chain through γ¹ = softplus(raw).
                    let raw = softplus_inv(state.read.gamma_init);
                    grad.push(a.item() * sigmoid(raw));
                } else {
                    grad.extend(&a.data);
                }
            }
        }
        EpisodeOutput { loss, final_error, finals, grad }
    }

    /// Loss and final iterates only.
    pub fn evaluate(&self, state: &MetaState, task: &TaskBatch, precision: Precision) -> Result<EpisodeOutput> {
        let b = self.binding(state, task, precision)?;
        let out = self.forward.run(&self.graph, &b)?;
        Ok(self.unpack(out, false, state))
    }

    /// Loss, final iterates and meta-gradient.
    pub fn gradient(&self, state: &MetaState, task: &TaskBatch, precision: Precision) -> Result<EpisodeOutput> {
        let b = self.binding(state, task, precision)?;
        let out = self.full.run(&self.graph, &b)?;
        Ok(self.unpack(out, true, state))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub final_error: f64,
    pub bit_error: f64,
    /// Meta-gradient norm before clipping.
    pub grad_norm: f64,
    /// The gradient was non-finite and no update was applied.
    pub skipped: bool,
}

/// One AdamW update from gradient `grad` (clipped in place).
/// Returns the pre-clip norm, or `None` if the gradient is non-finite.
pub fn apply_update(state: &mut MetaState, grad: &mut [f64], opt: &OptimConfig) -> Option<f64> {
    if grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    let norm = clip_global_norm(grad, opt.clip);
    let mut theta = state.flatten();
    let t = state.step as i32 + 1;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let n_weights: usize = state.params.iter().map(|p| p.data.len()).sum();
    let base = opt.lr_at(state.step);
    for i in 0..theta.len() {
        let lr = if i < n_weights { base } else { base * opt.schedule_lr_scale };
        let g = grad[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * opt.weight_decay * theta[i];
        theta[i] -= lr * mh / (vh.sqrt() + opt.eps);
    }
    state.unflatten(&theta);
    state.step += 1;
    Some(norm)
}

/// Differentiate through write and read on `task`, then update `state`.
pub fn meta_step(
    state: &mut MetaState,
    episode: &Episode,
    task: &TaskBatch,
    opt: &OptimConfig,
    precision: Precision,
) -> Result<StepMetrics> {
    let mut out = episode.gradient(state, task, precision)?;
    let bit_error = out.bit_error(task);
    let step = state.step;
    let (grad_norm, skipped) = match apply_update(state, &mut out.grad, opt) {
        Some(n) => (n, false),
        None => (f64::NAN, true),
    };
    Ok(StepMetrics { step, loss: out.loss, final_error: out.final_error, bit_error, grad_norm, skipped })
}

/// Meta-training run parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: EnergyArch,
    /// Patterns per task.
    pub batch: usize,
    pub write_steps: usize,
    pub read_steps: usize,
    pub distortion: DistortionSpec,
    /// Hold undistorted coordinates fixed while reading.
    #[serde(default)]
    pub clamp: bool,
    pub max_steps: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Initial write step size.
    #[serde(default = "default_write_rate")]
    pub init_write_rate: f64,
    #[serde(default = "default_one")]
    pub init_alpha: f64,
    #[serde(default = "default_one")]
    pub init_beta: f64,
    #[serde(default = "default_gamma")]
    pub init_read_step: f64,
    #[serde(default = "default_true")]
    pub grad_norm_term: bool,
    /// Steps per averaged metrics record.
    #[serde(default = "default_window")]
    pub window: u64,
    /// Stop after this many windows without a 1% loss improvement; 0 disables.
    #[serde(default)]
    pub patience: u64,
    /// Stop once a window's mean bit error falls below this.
    #[serde(default)]
    pub target_bit_error: Option<f64>,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_write_rate() -> f64 {
    1e-4
}

fn default_one() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_window() -> u64 {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch == 0 {
            return Err(MetaError::Config("batch must be positive".into()));
        }
        if self.read_steps == 0 {
            return Err(MetaError::Read(ReadError::NoSteps));
        }
        if self.window == 0 {
            return Err(MetaError::Config("window must be positive".into()));
        }
        for (name, v) in [
            ("init_write_rate", self.init_write_rate),
            ("init_alpha", self.init_alpha),
            ("init_beta", self.init_beta),
            ("init_read_step", self.init_read_step),
            ("optim.lr", self.optim.lr),
            ("optim.clip", self.optim.clip),
            ("optim.schedule_lr_scale", self.optim.schedule_lr_scale),
            ("optim.decay_factor", self.optim.decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MetaError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.distortion.validate(self.arch.dim(), Domain::Bipolar).or_else(|e| {
            self.distortion.validate(self.arch.dim(), Domain::UnitBox).map_err(|_| e)
        })?;
        Ok(())
    }

    /// Initial meta-state for `seed`.
    pub fn init_state(&self, seed: u64) -> Result<MetaState> {
        self.validate()?;
        let (params, _) = build(&self.arch, seed)?;
        let mut write = WriteSchedule::new(
            self.write_steps,
            params.writable_names(),
            self.init_write_rate,
            self.init_alpha,
            self.init_beta,
        );
        write.grad_norm_term = self.grad_norm_term;
        let mut read = ReadSchedule::new(self.read_steps);
        read.gamma_init = self.init_read_step;
        read.clamp = self.clamp;
        Ok(MetaState::from_parts(self.arch.clone(), params, write, read, seed))
    }
}

/// Averaged metrics over one window of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// Last step in the window.
    pub step: u64,
    pub loss: f64,
    pub final_error: f64,
    pub bit_error: f64,
    pub grad_norm: f64,
    pub skipped: u64,
}

/// Random stream for task `step` of a run seeded with `seed`.
pub const TASK_STREAM: u64 = 1;

/// Sample the task for `step`.
pub fn sample_task(
    source: &mut dyn PatternSource,
    batch: usize,
    spec: &DistortionSpec,
    seed: u64,
    stream: u64,
    step: u64,
) -> Result<TaskBatch> {
    let mut rng = sub_rng(seed, stream, step);
    let x = source.sample(batch, &mut rng)?;
    TaskBatch::distort(&x, spec, &mut rng)
}

/// Continue training `state` up to `config.max_steps`. `on_window` receives
/// averaged metrics and the current state after every window; returning
/// `false` stops early.
pub fn train(
    config: &TrainConfig,
    state: &mut MetaState,
    source: &mut dyn PatternSource,
    mut on_window: impl FnMut(&WindowMetrics, &MetaState) -> bool,
) -> Result<()> {
    config.validate()?;
    if source.dim() != config.arch.dim() {
        return Err(MetaError::DimMismatch { expected: config.arch.dim(), got: source.dim() });
    }
    let episode = Episode::new(state, config.batch, config.clamp)?;
    let mut acc = WindowMetrics { step: 0, loss: 0.0, final_error: 0.0, bit_error: 0.0, grad_norm: 0.0, skipped: 0 };
    let mut count = 0u64;
    let mut best = f64::INFINITY;
    let mut stale = 0u64;
    let mut draw = state.step;
    while state.step < config.max_steps {
        let task = sample_task(source, config.batch, &config.distortion, state.seed, TASK_STREAM, draw)?;
        draw += 1;
        let m = meta_step(state, &episode, &task, &config.optim, config.precision)?;
        count += 1;
        acc.loss += m.loss;
        acc.final_error += m.final_error;
        acc.bit_error += m.bit_error;
        if m.skipped {
            acc.skipped += 1;
            if acc.skipped > config.window {
                return Err(MetaError::Config("meta-gradient stayed non-finite for a full window".into()));
            }
        } else {
            acc.grad_norm += m.grad_norm;
        }
        if count == config.window {
            let n = count as f64;
            let used = (count - acc.skipped).max(1) as f64;
            let w = WindowMetrics {
                step: state.step,
                loss: acc.loss / n,
                final_error: acc.final_error / n,
                bit_error: acc.bit_error / n,
                grad_norm: acc.grad_norm / used,
                skipped: acc.skipped,
            };
            acc = WindowMetrics { step: 0, loss: 0.0, final_error: 0.0, bit_error: 0.0, grad_norm: 0.0, skipped: 0 };
            count = 0;
            let mut go = on_window(&w, state);
            if let Some(target) = config.target_bit_error {
                go &= w.bit_error >= target;
            }
            if config.patience > 0 {
                if w.loss < 0.99 * best {
                    best = w.loss;
                    stale = 0;
                } else {
                    stale += 1;
                    go &= stale < config.patience;
                }
            }
            if !go {
                break;
            }
        }
    }
    Ok(())
}

/// Mean bit error of `state` over `tasks` fresh tasks drawn from `stream`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    state: &MetaState,
    source: &mut dyn PatternSource,
    batch: usize,
    spec: &DistortionSpec,
    clamp: bool,
    tasks: u64,
    stream: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    let episode = Episode::new(state, batch, clamp)?;
    (0..tasks)
        .map(|i| {
            let task = sample_task(source, batch, spec, state.seed, stream, i)?;
            Ok(episode.evaluate(state, &task, precision)?.bit_error(&task))
        })
        .collect()
}
