//! Parametric energy functions `E(x; θ)` with a writable/static parameter split.
//!
//! Every architecture ends in a linear scalar head on top of tanh-bounded
//! features, so the energy is bounded below in `x` for fixed parameters.

use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{self, Array, Binding, Builder, Graph, NodeId, Plan, Precision, Shape, TapeError};

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("hidden size must be positive")]
    ZeroHidden,
    #[error("input dimension must be positive")]
    ZeroDim,
    #[error("architecture needs at least one writable parameter")]
    NoWritable,
    #[error("writable slice of {slice} exceeds layer size {layer}")]
    SliceTooLarge { slice: usize, layer: usize },
    #[error("pattern has dimension {got}, energy expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter `{0}` is missing or has the wrong shape")]
    Layout(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, EnergyError>;

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub writable: bool,
}

/// Named parameter arrays partitioned into writable (memory) and static.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(EnergyError::DuplicateName(p.name.clone()));
            }
            if p.data.len() != p.shape.len() {
                return Err(EnergyError::Layout(p.name.clone()));
            }
        }
        Ok(ParameterSet { params })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn writable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.writable)
    }

    pub fn writable_names(&self) -> Vec<String> {
        self.writable().map(|p| p.name.clone()).collect()
    }

    /// Number of writable scalars.
    pub fn memory_size(&self) -> usize {
        self.writable().map(|p| p.data.len()).sum()
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same names, shapes and writable flags in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.writable == b.writable)
    }

    /// Bind every parameter as `<prefix>.<name>`.
    pub fn bind(&self, binding: &mut Binding, prefix: &str) {
        for p in &self.params {
            binding.set(format!("{prefix}.{}", p.name), Array { shape: p.shape, data: p.data.clone() });
        }
    }

    /// Declare every parameter as an input `<prefix>.<name>`.
    pub fn declare(&self, b: &mut Builder, prefix: &str) -> tape::Result<ParamNodes> {
        let mut nodes = ParamNodes::default();
        for p in &self.params {
            let id = b.input(&format!("{prefix}.{}", p.name), p.shape)?;
            nodes.push(&p.name, id);
        }
        Ok(nodes)
    }

    /// Overwrite parameter values by name.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name).ok_or_else(|| EnergyError::UnknownParam(name.to_string()))?;
        if p.data.len() != data.len() {
            return Err(EnergyError::Layout(name.to_string()));
        }
        p.data = data;
        Ok(())
    }
}

/// Graph nodes standing for each parameter, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn push(&mut self, name: &str, id: NodeId) {
        self.names.push(name.to_string());
        self.ids.push(id);
    }

    pub fn get(&self, name: &str) -> tape::Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .ok_or_else(|| TapeError::UnknownInput(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.names.iter().map(String::as_str).zip(self.ids.iter().copied())
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn set(&mut self, name: &str, id: NodeId) {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            self.ids[i] = id;
        } else {
            self.push(name, id);
        }
    }
}

/// Energy network architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnergyArch {
    /// `½‖x − c‖²` with a writable centre `c`; a test energy.
    Quadratic { dim: usize },
    /// `wᵀx + b` with writable `w`; a test energy, linear in both arguments.
    Linear { dim: usize },
    /// Recurrent energy with an update gate. Each hop re-reads `x`; the
    /// first `dynamic` candidate units come from a writable linear map of `x`.
    GatedRnn { dim: usize, hidden: usize, hops: usize, dynamic: usize },
    /// Feed-forward representation refined by gated residual steps,
    /// `h ← h + u ⊙ g(h)`; the first `memory` units of the base layer are writable.
    MlpSkip { dim: usize, hidden: usize, hops: usize, memory: usize },
}

impl EnergyArch {
    /// Gated RNN with hidden size `8·dim`, 5 hops and `(dim − 1) / 2` writable units.
    pub fn gated_rnn(dim: usize) -> Self {
        EnergyArch::GatedRnn { dim, hidden: 8 * dim, hops: 5, dynamic: dim.saturating_sub(1) / 2 }
    }

    pub fn mlp_skip(dim: usize) -> Self {
        EnergyArch::MlpSkip { dim, hidden: 8 * dim, hops: 3, memory: dim.saturating_sub(1) / 2 }
    }

    pub fn dim(&self) -> usize {
        match *self {
            EnergyArch::Quadratic { dim }
            | EnergyArch::Linear { dim }
            | EnergyArch::GatedRnn { dim, .. }
            | EnergyArch::MlpSkip { dim, .. } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(EnergyError::ZeroDim);
        }
        match *self {
            EnergyArch::GatedRnn { hidden, dynamic, .. } | EnergyArch::MlpSkip { hidden, memory: dynamic, .. } => {
                if hidden == 0 {
                    return Err(EnergyError::ZeroHidden);
                }
                if dynamic == 0 {
                    return Err(EnergyError::NoWritable);
                }
                if dynamic > hidden {
                    return Err(EnergyError::SliceTooLarge { slice: dynamic, layer: hidden });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Parameter names, shapes, writability and He fan-in (0 for zero init).
    fn layout(&self) -> Vec<(&'static str, Shape, bool, usize)> {
        let v = Shape::vector;
        let m = Shape::matrix;
        match *self {
            EnergyArch::Quadratic { dim } => vec![("center", v(dim), true, 0)],
            EnergyArch::Linear { dim } => {
                vec![("weight", v(dim), true, dim), ("bias", Shape::SCALAR, false, 0)]
            }
            EnergyArch::GatedRnn { dim, hidden, dynamic, .. } => {
                let z = dim + hidden;
                vec![
                    ("memory.weight", m(dynamic, dim), true, dim),
                    ("memory.bias", v(dynamic), false, 0),
                    ("static.weight", m(hidden - dynamic, z), false, z),
                    ("static.bias", v(hidden - dynamic), false, 0),
                    ("gate.weight", m(hidden, z), false, z),
                    ("gate.bias", v(hidden), false, 0),
                    ("out.weight", v(hidden), false, hidden),
                    ("out.bias", Shape::SCALAR, false, 0),
                ]
            }
            EnergyArch::MlpSkip { dim, hidden, memory, .. } => vec![
                ("memory.weight", m(memory, dim), true, dim),
                ("memory.bias", v(memory), false, 0),
                ("base.weight", m(hidden - memory, dim), false, dim),
                ("base.bias", v(hidden - memory), false, 0),
                ("refine.weight", m(hidden, hidden), false, hidden),
                ("refine.bias", v(hidden), false, 0),
                ("gate.weight", m(hidden, hidden), false, hidden),
                ("gate.bias", v(hidden), false, 0),
                ("out.weight", v(hidden), false, hidden),
                ("out.bias", Shape::SCALAR, false, 0),
            ],
        }
    }
}

/// He-initialise parameters for `arch` and return them with the energy model.
pub fn build(arch: &EnergyArch, seed: u64) -> Result<(ParameterSet, EnergyModel)> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, shape, writable, fan_in) in arch.layout() {
        let data = if fan_in == 0 {
            vec![0.0; shape.len()]
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..shape.len()).map(|_| normal.sample(&mut rng)).collect()
        };
        params.push(Param { name: name.to_string(), shape, data, writable });
    }
    let params = ParameterSet::new(params)?;
    if params.memory_size() == 0 {
        return Err(EnergyError::NoWritable);
    }
    Ok((params, EnergyModel::new(arch.clone())))
}

struct Compiled {
    graph: Graph,
    energy: Plan,
    grad_x: Plan,
}

/// Builds the energy expression for a fixed architecture.
#[derive(Clone)]
pub struct EnergyModel {
    arch: EnergyArch,
    compiled: Arc<OnceLock<std::result::Result<Compiled, TapeError>>>,
}

impl std::fmt::Debug for EnergyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnergyModel").field("arch", &self.arch).finish()
    }
}

impl EnergyModel {
    pub fn new(arch: EnergyArch) -> Self {
        EnergyModel { arch, compiled: Arc::new(OnceLock::new()) }
    }

    pub fn arch(&self) -> &EnergyArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim()
    }

    /// Check that `params` has exactly this architecture's layout.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let layout = self.arch.layout();
        if layout.len() != params.len() {
            return Err(EnergyError::Layout(format!("{} parameters", params.len())));
        }
        for ((name, shape, writable, _), p) in layout.into_iter().zip(params.iter()) {
            if p.name != name || p.shape != shape || p.writable != writable {
                return Err(EnergyError::Layout(name.to_string()));
            }
        }
        Ok(())
    }

    /// Append `E(x; θ)` to the builder. `x` must be a vector of length `dim`.
    pub fn expr(&self, b: &mut Builder, x: NodeId, p: &ParamNodes) -> tape::Result<NodeId> {
        match self.arch {
            EnergyArch::Quadratic { .. } => {
                let d = b.sub(x, p.get("center")?)?;
                let sq = b.sq_norm(d);
                Ok(b.scale(0.5, sq))
            }
            EnergyArch::Linear { .. } => {
                let wx = b.dot(p.get("weight")?, x)?;
                b.add(wx, p.get("bias")?)
            }
            EnergyArch::GatedRnn { hidden, hops, .. } => {
                let memory = b.affine(p.get("memory.weight")?, x, p.get("memory.bias")?)?;
                let mut state = b.zeros(Shape::vector(hidden));
                for _ in 0..hops {
                    let z = b.concat(x, state)?;
                    let stat = b.affine(p.get("static.weight")?, z, p.get("static.bias")?)?;
                    let pre = b.concat(memory, stat)?;
                    let c = b.tanh(pre);
                    let gate = b.affine(p.get("gate.weight")?, z, p.get("gate.bias")?)?;
                    let u = b.sigmoid(gate);
                    // u·c + (1 − u)·state
                    let delta = b.sub(c, state)?;
                    let step = b.mul(u, delta)?;
                    state = b.add(state, step)?;
                }
                let e = b.dot(p.get("out.weight")?, state)?;
                b.add(e, p.get("out.bias")?)
            }
            EnergyArch::MlpSkip { hops, .. } => {
                let memory = b.affine(p.get("memory.weight")?, x, p.get("memory.bias")?)?;
                let base = b.affine(p.get("base.weight")?, x, p.get("base.bias")?)?;
                let pre = b.concat(memory, base)?;
                let mut h = b.tanh(pre);
                for _ in 0..hops {
                    let r = b.affine(p.get("refine.weight")?, h, p.get("refine.bias")?)?;
                    let g = b.tanh(r);
                    let gate = b.affine(p.get("gate.weight")?, h, p.get("gate.bias")?)?;
                    let u = b.sigmoid(gate);
                    let step = b.mul(u, g)?;
                    h = b.add(h, step)?;
                }
                let e = b.dot(p.get("out.weight")?, h)?;
                b.add(e, p.get("out.bias")?)
            }
        }
    }

    /// Standalone graph with inputs `x` and `theta.<name>`; outputs `[E, ∇ₓE]`.
    pub fn graph(&self) -> tape::Result<Graph> {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(self.dim()))?;
        let mut p = ParamNodes::default();
        for (name, shape, _, _) in self.arch.layout() {
            p.push(name, b.input(&format!("theta.{name}"), shape)?);
        }
        let e = self.expr(&mut b, x, &p)?;
        let gx = b.grad(e, &[x])?[0];
        Ok(b.finish(vec![e, gx]))
    }

    fn compiled(&self) -> Result<&Compiled> {
        let c = self.compiled.get_or_init(|| {
            let graph = self.graph()?;
            let energy = Plan::new(&graph, &graph.outputs()[..1]);
            let grad_x = Plan::new(&graph, &graph.outputs()[1..]);
            Ok(Compiled { graph, energy, grad_x })
        });
        c.as_ref().map_err(|e| EnergyError::Tape(e.clone()))
    }

    fn binding(&self, x: &[f64], params: &ParameterSet, precision: Precision) -> Result<Binding> {
        if x.len() != self.dim() {
            return Err(EnergyError::DimMismatch { expected: self.dim(), got: x.len() });
        }
        self.check_params(params)?;
        let mut bind = Binding::new(precision);
        bind.set("x", Array::vector(x.to_vec()));
        params.bind(&mut bind, "theta");
        Ok(bind)
    }

    pub fn energy(&self, x: &[f64], params: &ParameterSet, precision: Precision) -> Result<f64> {
        let c = self.compiled()?;
        let bind = self.binding(x, params, precision)?;
        Ok(c.energy.run(&c.graph, &bind)?[0].item())
    }

    pub fn grad_x(&self, x: &[f64], params: &ParameterSet, precision: Precision) -> Result<Vec<f64>> {
        let c = self.compiled()?;
        let bind = self.binding(x, params, precision)?;
        Ok(c.grad_x.run(&c.graph, &bind)?.swap_remove(0).data)
    }

    /// Gradient of the energy with respect to every parameter, in layout order.
    pub fn grad_theta(&self, x: &[f64], params: &ParameterSet, precision: Precision) -> Result<Vec<Vec<f64>>> {
        let c = self.compiled()?;
        let names: Vec<String> = params.iter().map(|p| format!("theta.{}", p.name)).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let energy_only = Builder::from_graph(&c.graph).finish(vec![c.graph.outputs()[0]]);
        let d = energy_only.derive(&refs)?;
        let bind = self.binding(x, params, precision)?;
        Ok(d.evaluate(&bind)?.into_iter().map(|a| a.data).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_rnn() -> EnergyArch {
        EnergyArch::GatedRnn { dim: 4, hidden: 6, hops: 3, dynamic: 2 }
    }

    #[test]
    fn build_is_deterministic() {
        let (a, _) = build(&tiny_rnn(), 7).unwrap();
        let (b, _) = build(&tiny_rnn(), 7).unwrap();
        let (c, _) = build(&tiny_rnn(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn memory_size_for_d128() {
        let arch = EnergyArch::gated_rnn(128);
        assert_eq!(arch, EnergyArch::GatedRnn { dim: 128, hidden: 1024, hops: 5, dynamic: 63 });
        // Count from the layout without allocating the full network.
        let mem: usize = arch.layout().iter().filter(|l| l.2).map(|l| l.1.len()).sum();
        assert_eq!(mem, 128 * 63);
        assert_eq!(128 * 127 / 2 + 128, 8256);
    }

    #[test]
    fn invalid_architectures() {
        let zero_hidden = EnergyArch::GatedRnn { dim: 4, hidden: 0, hops: 5, dynamic: 0 };
        assert_eq!(build(&zero_hidden, 0).unwrap_err(), EnergyError::ZeroHidden);
        let too_big = EnergyArch::GatedRnn { dim: 4, hidden: 3, hops: 5, dynamic: 4 };
        assert_eq!(build(&too_big, 0).unwrap_err(), EnergyError::SliceTooLarge { slice: 4, layer: 3 });
    }

    #[test]
    fn quadratic_values() {
        let (p, m) = build(&EnergyArch::Quadratic { dim: 2 }, 0).unwrap();
        assert_eq!(m.energy(&[1.0, 1.0], &p, Precision::F64).unwrap(), 1.0);
        assert_eq!(m.grad_x(&[0.0, 0.0], &p, Precision::F64).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.grad_x(&[0.3, -2.0], &p, Precision::F64).unwrap(), vec![0.3, -2.0]);
        assert_eq!(
            m.energy(&[1.0], &p, Precision::F64).unwrap_err(),
            EnergyError::DimMismatch { expected: 2, got: 1 }
        );
    }

    #[test]
    fn zero_weights_give_constant_energy() {
        for arch in [tiny_rnn(), EnergyArch::MlpSkip { dim: 4, hidden: 6, hops: 2, memory: 2 }] {
            let (mut p, m) = build(&arch, 3).unwrap();
            for q in p.iter_mut() {
                q.data.iter_mut().for_each(|v| *v = 0.0);
            }
            p.set_data("out.bias", vec![0.75]).unwrap();
            for x in [[0.0, 0.0, 0.0, 0.0], [1.0, 0.2, 0.9, 0.4]] {
                assert_eq!(m.energy(&x, &p, Precision::F64).unwrap(), 0.75);
            }
        }
    }
}
