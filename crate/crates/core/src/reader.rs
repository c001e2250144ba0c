//! Associative retrieval by truncated projected gradient descent with
//! Nesterov momentum on the energy.
//!
//! Iterates live in the unit box `[0, 1]^d`. With `v⁰ = 0` and `x⁰ = proj(x̃)`:
//!
//! ```text
//! x̂ᵏ = proj(xᵏ⁻¹ + ψᵏ vᵏ⁻¹)
//! vᵏ = ψᵏ vᵏ⁻¹ − γᵏ ∇ₓE(x̂ᵏ)
//! xᵏ = proj(xᵏ⁻¹ + vᵏ)
//! ```
//!
//! where `proj` clips to the box and re-imposes clamped coordinates, whose
//! velocity is held at zero. Step sizes are `γᵏ = γᵏ⁻¹ σ(ηᵏ)` and momenta
//! `ψᵏ = ψᵏ⁻¹ σ(λᵏ)` with `ψ⁰ = 1`, so both sequences are non-increasing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyError, EnergyModel, ParamNodes, ParameterSet};
use crate::patterns::{bipolar_to_unit, unit_to_bipolar};
use crate::tape::{self, Array, Binding, Builder, Graph, NodeId, Plan, Precision, Shape, TapeError};
use crate::util::sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum ReadError {
    #[error("read schedule needs at least one step")]
    NoSteps,
    #[error("initial step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("schedule has {got} {what} logits, expected {expected}")]
    LogitCount { what: &'static str, expected: usize, got: usize },
    #[error("query has dimension {got}, energy expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query coordinate {index} = {value} lies outside [0, 1]")]
    OutOfBox { index: usize, value: f64 },
    #[error("non-finite value at read iterate {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, ReadError>;

/// Learned step-size and momentum parametrization for `K` read steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadSchedule {
    pub steps: usize,
    /// γ¹ > 0.
    pub gamma_init: f64,
    /// η², …, ηᴷ.
    pub decay_logits: Vec<f64>,
    /// λ¹, …, λᴷ.
    pub momentum_logits: Vec<f64>,
    /// Hold known coordinates at their query values during retrieval.
    pub clamp: bool,
}

impl ReadSchedule {
    pub fn new(steps: usize) -> Self {
        ReadSchedule {
            steps,
            gamma_init: 0.1,
            decay_logits: vec![0.0; steps.saturating_sub(1)],
            momentum_logits: vec![0.0; steps],
            clamp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ReadError::NoSteps);
        }
        if !(self.gamma_init > 0.0) {
            return Err(ReadError::NonPositiveStep(self.gamma_init));
        }
        if self.decay_logits.len() != self.steps - 1 {
            return Err(ReadError::LogitCount {
                what: "decay",
                expected: self.steps - 1,
                got: self.decay_logits.len(),
            });
        }
        if self.momentum_logits.len() != self.steps {
            return Err(ReadError::LogitCount {
                what: "momentum",
                expected: self.steps,
                got: self.momentum_logits.len(),
            });
        }
        Ok(())
    }

    /// Step sizes `γ¹..γᴷ` and momenta `ψ¹..ψᴷ`.
    pub fn materialize(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let mut gammas = Vec::with_capacity(self.steps);
        let mut g = self.gamma_init;
        gammas.push(g);
        for &l in &self.decay_logits {
            g *= sigmoid(l);
            gammas.push(g);
        }
        let mut psis = Vec::with_capacity(self.steps);
        let mut p = 1.0;
        for &l in &self.momentum_logits {
            p *= sigmoid(l);
            psis.push(p);
        }
        Ok((gammas, psis))
    }

    pub fn gamma_name() -> &'static str {
        "read.gamma"
    }

    pub fn decay_name(k: usize) -> String {
        format!("read.decay.{k}")
    }

    pub fn momentum_name(k: usize) -> String {
        format!("read.momentum.{k}")
    }

    /// Declare the schedule leaves and build `γᵏ`, `ψᵏ` nodes.
    pub fn declare(&self, b: &mut Builder) -> tape::Result<ScheduleNodes> {
        let mut gammas = Vec::with_capacity(self.steps);
        let mut g = b.input(Self::gamma_name(), Shape::SCALAR)?;
        gammas.push(g);
        for k in 0..self.steps.saturating_sub(1) {
            let l = b.input(&Self::decay_name(k), Shape::SCALAR)?;
            let s = b.sigmoid(l);
            g = b.mul(g, s)?;
            gammas.push(g);
        }
        let mut psis = Vec::with_capacity(self.steps);
        let mut p: Option<NodeId> = None;
        for k in 0..self.steps {
            let l = b.input(&Self::momentum_name(k), Shape::SCALAR)?;
            let s = b.sigmoid(l);
            let next = match p {
                None => s,
                Some(prev) => b.mul(prev, s)?,
            };
            psis.push(next);
            p = Some(next);
        }
        Ok(ScheduleNodes { gammas, psis })
    }

    pub fn bind(&self, binding: &mut Binding) {
        binding.set(Self::gamma_name(), Array::scalar(self.gamma_init));
        for (k, &l) in self.decay_logits.iter().enumerate() {
            binding.set(Self::decay_name(k), Array::scalar(l));
        }
        for (k, &l) in self.momentum_logits.iter().enumerate() {
            binding.set(Self::momentum_name(k), Array::scalar(l));
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleNodes {
    pub gammas: Vec<NodeId>,
    pub psis: Vec<NodeId>,
}

/// Append the read iteration; returns the iterates `x⁰..xᴷ`.
///
/// `clamp` is a 0/1 mask marking coordinates fixed to the query.
pub fn read_expr(
    b: &mut Builder,
    model: &EnergyModel,
    params: &ParamNodes,
    query: NodeId,
    clamp: Option<NodeId>,
    sched: &ScheduleNodes,
) -> tape::Result<Vec<NodeId>> {
    let keep_known = match clamp {
        Some(m) => {
            let known = b.mul(m, query)?;
            let free = b.one_minus(m);
            Some((known, free))
        }
        None => None,
    };
    let proj = |b: &mut Builder, z: NodeId| -> tape::Result<NodeId> {
        let c = b.clip01(z);
        match keep_known {
            Some((known, free)) => {
                let f = b.mul(free, c)?;
                b.add(known, f)
            }
            None => Ok(c),
        }
    };
    let mut x = proj(b, query)?;
    let mut iterates = vec![x];
    let mut v: Option<NodeId> = None;
    for (&gamma, &psi) in sched.gammas.iter().zip(&sched.psis) {
        let lookahead = match v {
            Some(v) => {
                let m = b.scalar_mul(psi, v)?;
                let z = b.add(x, m)?;
                proj(b, z)?
            }
            None => x,
        };
        let e = model.expr(b, lookahead, params)?;
        let g = b.grad(e, &[lookahead])?[0];
        let step = b.scalar_mul(gamma, g)?;
        let mut vel = match v {
            Some(v) => {
                let m = b.scalar_mul(psi, v)?;
                b.sub(m, step)?
            }
            None => b.neg(step),
        };
        if let Some((_, free)) = keep_known {
            vel = b.mul(free, vel)?;
        }
        let z = b.add(x, vel)?;
        x = proj(b, z)?;
        iterates.push(x);
        v = Some(vel);
    }
    Ok(iterates)
}

/// Outcome of one retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult {
    /// `x⁰..xᴷ` in unit-box coordinates.
    pub trajectory: Vec<Vec<f64>>,
    /// `E(xᵏ)` for every iterate.
    pub energies: Vec<f64>,
}

impl ReadResult {
    pub fn final_pattern(&self) -> &[f64] {
        self.trajectory.last().expect("trajectory holds x⁰")
    }

    /// Final iterate thresholded at 0.5 and mapped to {−1, +1}.
    pub fn final_bipolar(&self) -> Vec<f64> {
        self.final_pattern().iter().map(|&u| unit_to_bipolar(u)).collect()
    }
}

/// A compiled read graph for one energy model, step count and clamp mode.
pub struct Reader {
    model: EnergyModel,
    steps: usize,
    clamped: bool,
    graph: Graph,
    plan: Plan,
}

impl Reader {
    pub fn new(model: &EnergyModel, params: &ParameterSet, steps: usize, clamped: bool) -> Result<Self> {
        model.check_params(params)?;
        let mut b = Builder::new();
        let d = model.dim();
        let q = b.input("query", Shape::vector(d))?;
        let mask = if clamped { Some(b.input("clamp", Shape::vector(d))?) } else { None };
        let p = params.declare(&mut b, "theta")?;
        let sched = ReadSchedule::new(steps).declare(&mut b)?;
        let iterates = read_expr(&mut b, model, &p, q, mask, &sched)?;
        let mut outputs = iterates.clone();
        for &x in &iterates {
            outputs.push(model.expr(&mut b, x, &p)?);
        }
        let graph = b.finish(outputs);
        let plan = Plan::new(&graph, graph.outputs());
        Ok(Reader { model: model.clone(), steps, clamped, graph, plan })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn read(
        &self,
        query: &[f64],
        params: &ParameterSet,
        sched: &ReadSchedule,
        clamp_mask: Option<&[bool]>,
        precision: Precision,
    ) -> Result<ReadResult> {
        sched.validate()?;
        if sched.steps != self.steps {
            return Err(ReadError::LogitCount { what: "step", expected: self.steps, got: sched.steps });
        }
        let d = self.model.dim();
        if query.len() != d {
            return Err(ReadError::DimMismatch { expected: d, got: query.len() });
        }
        if let Some((index, &value)) = query.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ReadError::OutOfBox { index, value });
        }
        let mut bind = Binding::new(precision);
        bind.set("query", Array::vector(query.to_vec()));
        if self.clamped {
            let mask: Vec<f64> = match clamp_mask {
                Some(m) if m.len() == d => m.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
                Some(m) => return Err(ReadError::DimMismatch { expected: d, got: m.len() }),
                None => vec![0.0; d],
            };
            bind.set("clamp", Array::vector(mask));
        }
        params.bind(&mut bind, "theta");
        sched.bind(&mut bind);
        let out = self.plan.run(&self.graph, &bind)?;
        let k1 = self.steps + 1;
        let trajectory: Vec<Vec<f64>> = out[..k1].iter().map(|a| a.data.clone()).collect();
        let energies: Vec<f64> = out[k1..].iter().map(|a| a.item()).collect();
        if let Some(k) = trajectory.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(ReadError::NonFinite(k));
        }
        if let Some(k) = energies.iter().position(|e| !e.is_finite()) {
            return Err(ReadError::NonFinite(k));
        }
        Ok(ReadResult { trajectory, energies })
    }

    /// Retrieve from a bipolar query; the result trajectory is in unit-box
    /// coordinates.
    pub fn read_bipolar(
        &self,
        query: &[f64],
        params: &ParameterSet,
        sched: &ReadSchedule,
        clamp_mask: Option<&[bool]>,
        precision: Precision,
    ) -> Result<ReadResult> {
        let q: Vec<f64> = query.iter().map(|&s| bipolar_to_unit(s)).collect();
        self.read(&q, params, sched, clamp_mask, precision)
    }
}

/// One-off retrieval. Compiles a fresh graph; use [`Reader`] for repeated calls.
pub fn read(
    model: &EnergyModel,
    query: &[f64],
    params: &ParameterSet,
    sched: &ReadSchedule,
    clamp_mask: Option<&[bool]>,
    precision: Precision,
) -> Result<ReadResult> {
    sched.validate()?;
    Reader::new(model, params, sched.steps, clamp_mask.is_some())?.read(query, params, sched, clamp_mask, precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{build, EnergyArch};

    #[test]
    fn zero_logits_halve_the_step() {
        let s = ReadSchedule::new(5);
        let (g, p) = s.materialize().unwrap();
        for k in 0..5 {
            assert_eq!(g[k], 0.1 * 0.5f64.powi(k as i32));
            assert_eq!(p[k], 0.5f64.powi(k as i32 + 1));
        }
    }

    #[test]
    fn large_logits_keep_the_step() {
        let mut s = ReadSchedule::new(4);
        s.decay_logits = vec![60.0; 3];
        let (g, _) = s.materialize().unwrap();
        assert!(g.iter().all(|&x| (x - 0.1).abs() < 1e-20));
    }

    #[test]
    fn logit_one_matches_direct_formula() {
        let mut s = ReadSchedule::new(5);
        s.decay_logits = vec![1.0; 4];
        let (g, _) = s.materialize().unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        for (k, gk) in g.iter().enumerate() {
            assert!((gk - 0.1 * sig1.powi(k as i32)).abs() < 1e-16);
        }
    }

    #[test]
    fn schedule_errors() {
        let mut s = ReadSchedule::new(3);
        s.gamma_init = 0.0;
        assert_eq!(s.materialize().unwrap_err(), ReadError::NonPositiveStep(0.0));
        assert_eq!(ReadSchedule::new(0).materialize().unwrap_err(), ReadError::NoSteps);
    }

    #[test]
    fn one_full_step_lands_on_quadratic_centre() {
        let (mut p, m) = build(&EnergyArch::Quadratic { dim: 3 }, 0).unwrap();
        let c = vec![0.2, 0.7, 0.5];
        p.set_data("center", c.clone()).unwrap();
        let mut s = ReadSchedule::new(1);
        s.gamma_init = 1.0;
        s.momentum_logits = vec![-50.0];
        let r = read(&m, &[0.9, 0.1, 0.5], &p, &s, None, Precision::F64).unwrap();
        for (a, b) in r.final_pattern().iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shrinks_toward_origin_inside_box() {
        let (p, m) = build(&EnergyArch::Quadratic { dim: 4 }, 0).unwrap();
        let r = read(&m, &[1.0; 4], &p, &ReadSchedule::new(5), None, Precision::F64).unwrap();
        for w in r.trajectory.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(b <= a && *b >= 0.0 && *b <= 1.0);
            }
        }
        assert!(r.final_pattern()[0] < 1.0);
    }

    #[test]
    fn clamped_coordinates_never_move() {
        let arch = EnergyArch::GatedRnn { dim: 6, hidden: 8, hops: 2, dynamic: 2 };
        let (p, m) = build(&arch, 1).unwrap();
        let mut s = ReadSchedule::new(4);
        s.gamma_init = 5.0;
        let q = [0.0, 1.0, 0.3, 0.6, 1.0, 0.0];
        let mask = [true, true, false, false, true, false];
        let r = read(&m, &q, &p, &s, Some(&mask), Precision::F64).unwrap();
        for x in &r.trajectory {
            for i in 0..6 {
                if mask[i] {
                    assert_eq!(x[i].to_bits(), q[i].to_bits());
                }
                assert!((0.0..=1.0).contains(&x[i]));
            }
        }
    }

    #[test]
    fn query_validation() {
        let (p, m) = build(&EnergyArch::Quadratic { dim: 2 }, 0).unwrap();
        let s = ReadSchedule::new(2);
        assert_eq!(
            read(&m, &[0.5], &p, &s, None, Precision::F64).unwrap_err(),
            ReadError::DimMismatch { expected: 2, got: 1 }
        );
        assert!(matches!(
            read(&m, &[0.5, 1.5], &p, &s, None, Precision::F64),
            Err(ReadError::OutOfBox { index: 1, .. })
        ));
    }

    #[test]
    fn non_finite_iterates_are_reported() {
        let (mut p, m) = build(&EnergyArch::Linear { dim: 2 }, 0).unwrap();
        p.set_data("weight", vec![f64::NAN, 0.0]).unwrap();
        let r = read(&m, &[0.5, 0.5], &p, &ReadSchedule::new(3), None, Precision::F64);
        assert_eq!(r.unwrap_err(), ReadError::NonFinite(1));
    }
}
