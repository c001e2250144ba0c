//! Writing rule: `T` steps of gradient descent on the writing loss
//!
//! ```text
//! W(x, θ) = E(x; θ) + α‖∇ₓE(x; θ)‖² + β‖θ − θ̄‖²
//! ```
//!
//! averaged over the batch, starting from `θ⁰ = θ̄`. Only writable
//! parameters move. Each step, each writable layer and each of the three
//! terms has its own softplus-parametrized step size; a layer's update is
//! the sum of the three rate-scaled term gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyError, EnergyModel, ParamNodes, ParameterSet};
use crate::patterns::PatternBatch;
use crate::tape::{self, Array, Binding, Builder, Graph, NodeId, Plan, Precision, Shape, TapeError};
use crate::util::{softplus, softplus_inv};

#[derive(Debug, Error, PartialEq)]
pub enum WriteError {
    #[error("cannot write an empty batch")]
    EmptyBatch,
    #[error("pattern has dimension {got}, energy expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter sets have different layouts")]
    LayoutMismatch,
    #[error("write schedule covers layers {got:?}, parameters have writable layers {expected:?}")]
    ScheduleLayers { expected: Vec<String>, got: Vec<String> },
    #[error("write schedule has {got} rates, expected {expected}")]
    RateCount { expected: usize, got: usize },
    #[error("writer compiled for {expected} patterns, got {got}")]
    BatchSize { expected: usize, got: usize },
    #[error("write schedule does not match the compiled writer")]
    ScheduleShape,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, WriteError>;

/// The three writing-loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Energy = 0,
    GradNorm = 1,
    Drift = 2,
}

pub const TERMS: [LossTerm; 3] = [LossTerm::Energy, LossTerm::GradNorm, LossTerm::Drift];

/// Learned write step sizes and the α, β meta-parameters, all stored
/// pre-softplus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriteSchedule {
    pub steps: usize,
    /// Writable layer names, in parameter order.
    pub layers: Vec<String>,
    /// `steps × layers × 3`, row-major.
    pub rates_raw: Vec<f64>,
    pub alpha_raw: f64,
    pub beta_raw: f64,
    /// Include the `α‖∇ₓE‖²` term; off for ablations.
    #[serde(default = "enabled")]
    pub grad_norm_term: bool,
}

fn enabled() -> bool {
    true
}

impl WriteSchedule {
    /// All rates start at `init_rate`.
    pub fn new(steps: usize, layers: Vec<String>, init_rate: f64, alpha: f64, beta: f64) -> Self {
        let n = steps * layers.len() * 3;
        WriteSchedule {
            steps,
            layers,
            rates_raw: vec![softplus_inv(init_rate); n],
            alpha_raw: softplus_inv(alpha),
            beta_raw: softplus_inv(beta),
            grad_norm_term: true,
        }
    }

    /// Rates of 1e-4 and α = β = 1 for the writable layers of `params`.
    pub fn for_params(steps: usize, params: &ParameterSet) -> Self {
        Self::new(steps, params.writable_names(), 1e-4, 1.0, 1.0)
    }

    pub fn index(&self, step: usize, layer: usize, term: LossTerm) -> usize {
        (step * self.layers.len() + layer) * 3 + term as usize
    }

    pub fn rate(&self, step: usize, layer: usize, term: LossTerm) -> f64 {
        softplus(self.rates_raw[self.index(step, layer, term)])
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_raw)
    }

    pub fn beta(&self) -> f64 {
        softplus(self.beta_raw)
    }

    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        let expected = params.writable_names();
        if expected != self.layers {
            return Err(WriteError::ScheduleLayers { expected, got: self.layers.clone() });
        }
        let n = self.steps * self.layers.len() * 3;
        if self.rates_raw.len() != n {
            return Err(WriteError::RateCount { expected: n, got: self.rates_raw.len() });
        }
        Ok(())
    }

    pub fn rate_name(step: usize, layer: usize, term: LossTerm) -> String {
        format!("write.rate.{step}.{layer}.{}", term as usize)
    }

    pub const ALPHA: &'static str = "write.alpha";
    pub const BETA: &'static str = "write.beta";

    pub fn declare(&self, b: &mut Builder) -> tape::Result<WriteNodes> {
        let mut rates = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let mut per_layer = Vec::with_capacity(self.layers.len());
            for l in 0..self.layers.len() {
                let mut per_term = Vec::with_capacity(3);
                for term in TERMS {
                    let raw = b.input(&Self::rate_name(t, l, term), Shape::SCALAR)?;
                    per_term.push(b.softplus(raw));
                }
                per_layer.push([per_term[0], per_term[1], per_term[2]]);
            }
            rates.push(per_layer);
        }
        let alpha = if self.grad_norm_term {
            let a = b.input(Self::ALPHA, Shape::SCALAR)?;
            Some(b.softplus(a))
        } else {
            None
        };
        let be = b.input(Self::BETA, Shape::SCALAR)?;
        let beta = b.softplus(be);
        Ok(WriteNodes { rates, alpha, beta })
    }

    pub fn bind(&self, binding: &mut Binding) {
        for t in 0..self.steps {
            for l in 0..self.layers.len() {
                for term in TERMS {
                    let v = self.rates_raw[self.index(t, l, term)];
                    binding.set(Self::rate_name(t, l, term), Array::scalar(v));
                }
            }
        }
        if self.grad_norm_term {
            binding.set(Self::ALPHA, Array::scalar(self.alpha_raw));
        }
        binding.set(Self::BETA, Array::scalar(self.beta_raw));
    }
}

/// Materialized schedule nodes: `rates[t][layer][term]`, `α`, `β`.
/// `alpha` is `None` when the gradient-norm term is disabled.
#[derive(Clone, Debug)]
pub struct WriteNodes {
    pub rates: Vec<Vec<[NodeId; 3]>>,
    pub alpha: Option<NodeId>,
    pub beta: NodeId,
}

/// Nodes of the three writing-loss terms for one pattern.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub energy: NodeId,
    /// `α‖∇ₓE‖²`
    pub grad_norm: NodeId,
    /// `β‖θ − θ̄‖²` over writable parameters.
    pub drift: NodeId,
    pub total: NodeId,
}

/// Append the writing loss for pattern node `x`.
#[allow(clippy::too_many_arguments)]
pub fn writing_loss_expr(
    b: &mut Builder,
    model: &EnergyModel,
    x: NodeId,
    theta: &ParamNodes,
    prior: &ParamNodes,
    writable: &[String],
    alpha: NodeId,
    beta: NodeId,
) -> tape::Result<LossNodes> {
    // θ may itself depend on x; ∇ₓE is taken with θ held fixed.
    let x = b.alias(x);
    let energy = model.expr(b, x, theta)?;
    let gx = b.grad(energy, &[x])?[0];
    let gn = b.sq_norm(gx);
    let grad_norm = b.mul(alpha, gn)?;
    let drift = drift_expr(b, theta, prior, writable, beta)?;
    let t = b.add(energy, grad_norm)?;
    let total = b.add(t, drift)?;
    Ok(LossNodes { energy, grad_norm, drift, total })
}

fn drift_expr(
    b: &mut Builder,
    theta: &ParamNodes,
    prior: &ParamNodes,
    writable: &[String],
    beta: NodeId,
) -> tape::Result<NodeId> {
    let mut acc = b.scalar(0.0);
    for name in writable {
        let d = b.sub(theta.get(name)?, prior.get(name)?)?;
        let s = b.sq_norm(d);
        acc = b.add(acc, s)?;
    }
    b.mul(beta, acc)
}

/// Result nodes of the unrolled write.
#[derive(Clone, Debug)]
pub struct WriteExpr {
    /// `θᵀ`; static entries are the prior's nodes.
    pub params: ParamNodes,
    /// Batch-mean writing loss at `θ⁰..θᵀ`.
    pub losses: Vec<NodeId>,
}

/// Append `T` write steps storing `patterns` into the writable entries of `prior`.
pub fn write_expr(
    b: &mut Builder,
    model: &EnergyModel,
    prior: &ParamNodes,
    writable: &[String],
    patterns: &[NodeId],
    sched: &WriteNodes,
) -> tape::Result<WriteExpr> {
    let inv_n = 1.0 / patterns.len() as f64;
    let mut theta = prior.clone();
    let mut losses = Vec::with_capacity(sched.rates.len() + 1);
    for t in 0..=sched.rates.len() {
        let mut sum_e = b.scalar(0.0);
        let mut sum_gn = b.scalar(0.0);
        for &x in patterns {
            // θᵗ depends on the patterns; ∇ₓE must not see that path.
            let x = b.alias(x);
            let energy = model.expr(b, x, &theta)?;
            sum_e = b.add(sum_e, energy)?;
            if sched.alpha.is_some() {
                let gx = b.grad(energy, &[x])?[0];
                let gn = b.sq_norm(gx);
                sum_gn = b.add(sum_gn, gn)?;
            }
        }
        let mean_e = b.scale(inv_n, sum_e);
        let gn_term = match sched.alpha {
            Some(alpha) => {
                let mean_gn = b.scale(inv_n, sum_gn);
                b.mul(alpha, mean_gn)?
            }
            None => b.scalar(0.0),
        };
        let drift = drift_expr(b, &theta, prior, writable, sched.beta)?;
        let l0 = b.add(mean_e, gn_term)?;
        losses.push(b.add(l0, drift)?);
        if t == sched.rates.len() {
            break;
        }

        let nodes: Vec<NodeId> = writable.iter().map(|n| theta.get(n)).collect::<tape::Result<_>>()?;
        let terms = [mean_e, gn_term, drift];
        let updates: Vec<NodeId> = if writable.len() == 1 {
            // One layer: a single backward pass through the rate-weighted sum.
            let r = &sched.rates[t][0];
            let mut obj = b.scalar(0.0);
            for (k, &term) in terms.iter().enumerate() {
                let w = b.mul(r[k], term)?;
                obj = b.add(obj, w)?;
            }
            b.grad(obj, &nodes)?
        } else {
            let grads: Vec<Vec<NodeId>> =
                terms.iter().map(|&term| b.grad(term, &nodes)).collect::<tape::Result<_>>()?;
            let mut ups = Vec::with_capacity(nodes.len());
            for l in 0..nodes.len() {
                let mut u: Option<NodeId> = None;
                for k in 0..3 {
                    let s = b.scalar_mul(sched.rates[t][l][k], grads[k][l])?;
                    u = Some(match u {
                        None => s,
                        Some(prev) => b.add(prev, s)?,
                    });
                }
                ups.push(u.expect("three terms"));
            }
            ups
        };
        for ((name, &node), &up) in writable.iter().zip(&nodes).zip(&updates) {
            let next = b.sub(node, up)?;
            theta.set(name, next);
        }
    }
    Ok(WriteExpr { params: theta, losses })
}

/// Per-term breakdown of the writing loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WritingLoss {
    pub energy: f64,
    pub grad_norm: f64,
    pub drift: f64,
    pub total: f64,
}

/// Evaluate `W(x, θ)` against prior `θ̄` with explicit `α`, `β`.
pub fn writing_loss(
    model: &EnergyModel,
    x: &[f64],
    theta: &ParameterSet,
    prior: &ParameterSet,
    alpha: f64,
    beta: f64,
    precision: Precision,
) -> Result<WritingLoss> {
    model.check_params(theta)?;
    if !theta.same_layout(prior) {
        return Err(WriteError::LayoutMismatch);
    }
    if x.len() != model.dim() {
        return Err(WriteError::DimMismatch { expected: model.dim(), got: x.len() });
    }
    let mut b = Builder::new();
    let xn = b.input("x", Shape::vector(model.dim()))?;
    let tn = theta.declare(&mut b, "theta")?;
    let pn = prior.declare(&mut b, "prior")?;
    let a = b.input("alpha", Shape::SCALAR)?;
    let be = b.input("beta", Shape::SCALAR)?;
    let l = writing_loss_expr(&mut b, model, xn, &tn, &pn, &theta.writable_names(), a, be)?;
    let g = b.finish(vec![l.energy, l.grad_norm, l.drift, l.total]);
    let mut bind = Binding::new(precision);
    bind.set("x", Array::vector(x.to_vec()));
    bind.set("alpha", Array::scalar(alpha));
    bind.set("beta", Array::scalar(beta));
    theta.bind(&mut bind, "theta");
    prior.bind(&mut bind, "prior");
    let out = g.evaluate(&bind)?;
    let names = ["energy term", "gradient-norm term", "drift term", "writing loss"];
    for (a, n) in out.iter().zip(names) {
        if !a.item().is_finite() {
            return Err(WriteError::NonFinite(n.to_string()));
        }
    }
    Ok(WritingLoss { energy: out[0].item(), grad_norm: out[1].item(), drift: out[2].item(), total: out[3].item() })
}

/// A compiled write graph for a fixed model, batch size and step count.
pub struct Writer {
    model: EnergyModel,
    batch: usize,
    steps: usize,
    grad_norm_term: bool,
    writable: Vec<String>,
    graph: Graph,
    plan: Plan,
}

impl Writer {
    /// Compile for `batch` patterns with the step count and terms of `sched`.
    pub fn new(model: &EnergyModel, prior: &ParameterSet, batch: usize, sched: &WriteSchedule) -> Result<Self> {
        if batch == 0 {
            return Err(WriteError::EmptyBatch);
        }
        model.check_params(prior)?;
        sched.validate(prior)?;
        let writable = prior.writable_names();
        let mut b = Builder::new();
        let xs: Vec<NodeId> = (0..batch)
            .map(|i| b.input(&format!("x.{i}"), Shape::vector(model.dim())))
            .collect::<tape::Result<_>>()?;
        let p = prior.declare(&mut b, "theta")?;
        let nodes = sched.declare(&mut b)?;
        let w = write_expr(&mut b, model, &p, &writable, &xs, &nodes)?;
        let mut outputs: Vec<NodeId> = writable.iter().map(|n| w.params.get(n)).collect::<tape::Result<_>>()?;
        outputs.extend(&w.losses);
        let graph = b.finish(outputs);
        let plan = Plan::new(&graph, graph.outputs());
        Ok(Writer {
            model: model.clone(),
            batch,
            steps: sched.steps,
            grad_norm_term: sched.grad_norm_term,
            writable,
            graph,
            plan,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Nodes evaluated per write.
    pub fn cost(&self) -> usize {
        self.plan.len()
    }

    /// Store `patterns` (unit-box coordinates). Returns `θᵀ` and the
    /// batch-mean writing loss at `θ⁰..θᵀ`.
    pub fn write(
        &self,
        patterns: &PatternBatch,
        prior: &ParameterSet,
        sched: &WriteSchedule,
        precision: Precision,
    ) -> Result<(ParameterSet, Vec<f64>)> {
        if patterns.is_empty() {
            return Err(WriteError::EmptyBatch);
        }
        if patterns.len() != self.batch {
            return Err(WriteError::BatchSize { expected: self.batch, got: patterns.len() });
        }
        if patterns.dim() != self.model.dim() {
            return Err(WriteError::DimMismatch { expected: self.model.dim(), got: patterns.dim() });
        }
        self.model.check_params(prior)?;
        sched.validate(prior)?;
        if sched.steps != self.steps || sched.grad_norm_term != self.grad_norm_term {
            return Err(WriteError::ScheduleShape);
        }
        let mut bind = Binding::new(precision);
        for (i, row) in patterns.rows().enumerate() {
            bind.set(format!("x.{i}"), Array::vector(row.to_vec()));
        }
        prior.bind(&mut bind, "theta");
        sched.bind(&mut bind);
        let out = self.plan.run(&self.graph, &bind)?;
        let mut theta = prior.clone();
        for (name, a) in self.writable.iter().zip(&out) {
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(WriteError::NonFinite(format!("update of `{name}`")));
            }
            theta.set_data(name, a.data.clone())?;
        }
        let trace: Vec<f64> = out[self.writable.len()..].iter().map(|a| a.item()).collect();
        Ok((theta, trace))
    }
}

/// One-off write; compiles a fresh graph.
pub fn write(
    model: &EnergyModel,
    patterns: &PatternBatch,
    prior: &ParameterSet,
    sched: &WriteSchedule,
    precision: Precision,
) -> Result<(ParameterSet, Vec<f64>)> {
    if patterns.is_empty() {
        return Err(WriteError::EmptyBatch);
    }
    Writer::new(model, prior, patterns.len(), sched)?.write(patterns, prior, sched, precision)
}
