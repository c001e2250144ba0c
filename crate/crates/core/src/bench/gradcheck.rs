//! Finite-difference checks of every derivative the system relies on:
//! elementary tape ops, the energy, the writing loss and the meta-gradient
//! through one write step and one read step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{streams, BenchError, Result, Table};
use crate::distort::DistortionSpec;
use crate::energy::{build, EnergyArch, EnergyModel, ParameterSet};
use crate::metatrain::{episode_expr, MetaState, TaskBatch};
use crate::patterns::PatternBatch;
use crate::tape::{finite_diff, relative_error, Array, Binding, Builder, Fault, Graph, Precision, Shape};
use crate::util::sub_rng;
use crate::writer::writing_loss_expr;

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub quantity: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every
    /// checked input.
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub checks: Vec<Check>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, quantity: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.quantity == quantity)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// `Err` naming every failing quantity.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{} (error {:.3e} > {:.0e})", c.quantity, c.rel_error, c.tolerance))
            .collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(BenchError::GradCheck(failed.join(", ")))
        }
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["quantity", "rel_error", "tolerance", "pass"].map(String::from).to_vec());
        for c in &self.checks {
            t.push(vec![c.quantity.clone(), format!("{:.3e}", c.rel_error), format!("{:e}", c.tolerance), c.pass.to_string()]);
        }
        t
    }
}

/// Compare the reverse-mode gradient of `graph`'s scalar output against
/// central differences, for every input in `wrt`. `fault` corrupts the
/// analytic side only.
pub fn compare(
    quantity: &str,
    graph: &Graph,
    bind: &Binding,
    wrt: &[&str],
    tolerance: f64,
    fault: Option<Fault>,
) -> Result<Check> {
    let mut b = Builder::from_graph(graph);
    b.set_fault(fault);
    let out = graph.outputs()[0];
    let ids = wrt
        .iter()
        .map(|n| graph.input_id(n).ok_or_else(|| BenchError::GradCheck(format!("no input `{n}`"))))
        .collect::<Result<Vec<_>>>()?;
    let grads = b.grad(out, &ids)?;
    let analytic: Vec<f64> = b.finish(grads).evaluate(bind)?.into_iter().flat_map(|a| a.data).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for name in wrt {
        numeric.extend(finite_diff(graph, bind, name, EPS)?);
    }
    let rel_error = relative_error(&analytic, &numeric, FLOOR);
    Ok(Check { quantity: quantity.to_string(), rel_error, tolerance, pass: rel_error < tolerance })
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// A graph touching every differentiable op: inputs `u` (n), `v` (n),
/// `w` (n×n) and scalar `s`.
fn ops_graph(n: usize) -> Result<Graph> {
    let mut b = Builder::new();
    let u = b.input("u", Shape::vector(n))?;
    let v = b.input("v", Shape::vector(n))?;
    let w = b.input("w", Shape::matrix(n, n))?;
    let s = b.input("s", Shape::SCALAR)?;
    let a = b.matvec(w, u)?;
    let a = b.tanh(a);
    let c = b.mat_t_vec(w, v)?;
    let c = b.sigmoid(c);
    let m = b.mul(a, c)?;
    let sm = b.scalar_mul(s, m)?;
    let sp = b.softplus(sm);
    let off = b.offset(0.3, sp);
    let sub = b.sub(off, v)?;
    let cat = b.concat(sub, a)?;
    let sl = b.slice(cat, 1, n)?;
    let pad = b.pad(sl, 0, n + 1)?;
    let pad = b.slice(pad, 0, n)?;
    let o = b.outer(pad, u)?;
    let o = b.outer_acc(o, c, v)?;
    let ov = b.matvec(o, v)?;
    let bc = b.broadcast(s, Shape::vector(n))?;
    let sum = b.add(ov, bc)?;
    let d = b.dot(sum, m)?;
    let q = b.sq_norm(sum);
    let q = b.scale(0.5, q);
    let t = b.sum(a);
    let r = b.add(d, q)?;
    let r = b.add(r, t)?;
    Ok(b.finish(vec![r]))
}

fn energy_graph(model: &EnergyModel, params: &ParameterSet, grad_norm: bool) -> Result<Graph> {
    let mut b = Builder::new();
    let x = b.input("x", Shape::vector(model.dim()))?;
    let p = params.declare(&mut b, "theta")?;
    let e = model.expr(&mut b, x, &p)?;
    if !grad_norm {
        return Ok(b.finish(vec![e]));
    }
    let g = b.grad(e, &[x])?[0];
    let n = b.sq_norm(g);
    Ok(b.finish(vec![n]))
}

fn theta_names(params: &ParameterSet, prefix: &str) -> Vec<String> {
    params.iter().map(|p| format!("{prefix}.{}", p.name)).collect()
}

/// Run every suite on `arch` with random inputs drawn from `seed`.
pub fn gradcheck(arch: &EnergyArch, seed: u64, fault: Option<Fault>) -> Result<GradReport> {
    let mut rng = sub_rng(seed, streams::of(streams::GRADCHECK, arch.dim()), 0);
    let d = arch.dim();
    let mut checks = Vec::new();

    // Elementary ops.
    let g = ops_graph(d.max(2))?;
    let n = d.max(2);
    let mut bind = Binding::new(Precision::F64);
    bind.set("u", Array::vector(uniform(&mut rng, n, -1.0, 1.0)));
    bind.set("v", Array::vector(uniform(&mut rng, n, -1.0, 1.0)));
    bind.set("w", Array::matrix(n, n, uniform(&mut rng, n * n, -1.0, 1.0))?);
    bind.set("s", Array::scalar(rng.gen_range(0.5..1.5)));
    checks.push(compare("tape.ops", &g, &bind, &["u", "v", "w", "s"], 1e-6, fault)?);

    // Energy.
    let (params, model) = build(arch, seed)?;
    let theta = theta_names(&params, "theta");
    let theta: Vec<&str> = theta.iter().map(String::as_str).collect();
    let mut bind = Binding::new(Precision::F64);
    bind.set("x", Array::vector(uniform(&mut rng, d, 0.0, 1.0)));
    params.bind(&mut bind, "theta");
    let g = energy_graph(&model, &params, false)?;
    checks.push(compare("energy.grad_x", &g, &bind, &["x"], 1e-6, fault)?);
    checks.push(compare("energy.grad_theta", &g, &bind, &theta, 1e-6, fault)?);
    let g = energy_graph(&model, &params, true)?;
    checks.push(compare("tape.second_order", &g, &bind, &theta, 1e-5, fault)?);

    // Writing loss at θ ≠ θ̄, α, β > 0.
    let mut moved = params.clone();
    for p in moved.iter_mut().filter(|p| p.writable) {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mut b = Builder::new();
    let x = b.input("x", Shape::vector(d))?;
    let tn = moved.declare(&mut b, "theta")?;
    let pn = params.declare(&mut b, "prior")?;
    let alpha = b.input("alpha", Shape::SCALAR)?;
    let beta = b.input("beta", Shape::SCALAR)?;
    let l = writing_loss_expr(&mut b, &model, x, &tn, &pn, &params.writable_names(), alpha, beta)?;
    let g = b.finish(vec![l.total]);
    moved.bind(&mut bind, "theta");
    params.bind(&mut bind, "prior");
    bind.set("alpha", Array::scalar(0.7));
    bind.set("beta", Array::scalar(1.3));
    checks.push(compare("writer.loss_theta", &g, &bind, &theta, 1e-5, fault)?);

    // Meta-gradient through one write step and one read step.
    let mut state = MetaState::init(arch, 1, 1, seed)?;
    for r in state.write.rates_raw.iter_mut() {
        *r = rng.gen_range(-3.0..-1.0);
    }
    state.read.gamma_init = 0.2;
    let x = PatternBatch::random_bipolar(2, d, &mut rng);
    let task = TaskBatch::distort(&x, &DistortionSpec::flip(d / 4), &mut rng)?;
    let mut b = Builder::new();
    let e = episode_expr(&mut b, &state, 2, false)?;
    let g = b.finish(vec![e.loss]);
    let mut bind = Binding::new(Precision::F64);
    task.bind(&mut bind, false);
    state.bind(&mut bind);
    let leaves: Vec<String> = state.meta_layout().into_iter().map(|(n, _)| n).collect();
    let leaves: Vec<&str> = leaves.iter().map(String::as_str).collect();
    checks.push(compare("metatrain.meta_grad", &g, &bind, &leaves, 1e-5, fault)?);

    Ok(GradReport { checks })
}

/// The architecture used when none is configured: a gated RNN with `d = 6`.
pub fn default_arch() -> EnergyArch {
    EnergyArch::GatedRnn { dim: 6, hidden: 8, hops: 2, dynamic: 3 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;

    #[test]
    fn quadratic_is_nearly_exact() {
        let r = gradcheck(&EnergyArch::Quadratic { dim: 5 }, 1, None).unwrap();
        assert!(r.passed(), "{r:#?}");
        // Polynomial in the checked inputs, so central differences are exact
        // up to rounding.
        for q in ["energy.grad_x", "energy.grad_theta", "tape.second_order", "writer.loss_theta"] {
            let c = r.get(q).unwrap();
            assert!(c.rel_error < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn gated_rnn_passes() {
        let r = gradcheck(&default_arch(), 2, None).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(r.get("energy.grad_x").unwrap().rel_error < 1e-6);
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let fault = Fault { op: OpKind::Tanh, factor: 1.1 };
        let r = gradcheck(&default_arch(), 2, Some(fault)).unwrap();
        assert!(!r.get("energy.grad_x").unwrap().pass);
        let e = r.into_result().unwrap_err().to_string();
        assert!(e.contains("energy.grad_x"), "{e}");
    }
}
