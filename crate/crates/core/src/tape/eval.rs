use std::collections::HashMap;
use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Op, Result, Shape, TapeError};

/// Floating-point type an evaluation runs in.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// A dense real array used at the graph boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TapeError::ConstLen { shape, got: data.len() });
        }
        Ok(Array { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: Shape::SCALAR, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array { shape: Shape::vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(Shape::matrix(rows, cols), data)
    }

    /// Value of a scalar (or the first element).
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Values for the named leaves of a graph plus the evaluation precision.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    values: HashMap<String, Array>,
    pub precision: Precision,
}

impl Binding {
    pub fn new(precision: Precision) -> Self {
        Binding { values: HashMap::new(), precision }
    }

    pub fn set(&mut self, name: impl Into<String>, value: Array) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: Array) -> Self {
        self.set(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.values.get_mut(name)
    }
}

/// A pruned evaluation schedule for a fixed set of outputs.
///
/// Intermediate buffers are released after their last consumer, and dying
/// buffers are reused in place where the operation allows it.
#[derive(Clone, Debug)]
pub struct Plan {
    order: Vec<NodeId>,
    /// Position in `order` of each node's last consumer; `u32::MAX` for outputs.
    last_use: Vec<u32>,
    outputs: Vec<NodeId>,
    inputs: Vec<(String, NodeId)>,
}

impl Plan {
    pub fn new(graph: &Graph, outputs: &[NodeId]) -> Plan {
        let n = graph.nodes.len();
        let mut needed = vec![false; n];
        for &o in outputs {
            needed[o.index()] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for &p in graph.nodes[i].op.operands().as_slice() {
                    needed[p.index()] = true;
                }
            }
        }
        let order: Vec<NodeId> = (0..n).filter(|&i| needed[i]).map(|i| NodeId(i as u32)).collect();
        let mut last_use = vec![0u32; n];
        for (pos, id) in order.iter().enumerate() {
            for &p in graph.nodes[id.index()].op.operands().as_slice() {
                last_use[p.index()] = pos as u32;
            }
        }
        for &o in outputs {
            last_use[o.index()] = u32::MAX;
        }
        let inputs = graph
            .inputs
            .iter()
            .filter(|(_, id)| needed[id.index()])
            .cloned()
            .collect();
        Plan { order, last_use, outputs: outputs.to_vec(), inputs }
    }

    /// Number of nodes the plan evaluates.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Names of the leaves this plan reads.
    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|(n, _)| n.as_str())
    }

    pub fn run(&self, graph: &Graph, binding: &Binding) -> Result<Vec<Array>> {
        for (name, id) in &self.inputs {
            let v = binding.get(name).ok_or_else(|| TapeError::MissingBinding(name.clone()))?;
            let expected = graph.shape(*id);
            if v.shape != expected {
                return Err(TapeError::BindingShape { name: name.clone(), expected, got: v.shape });
            }
        }
        match binding.precision {
            Precision::F32 => Ok(self.run_typed::<f32>(graph, binding)),
            Precision::F64 => Ok(self.run_typed::<f64>(graph, binding)),
        }
    }

    fn run_typed<F: Scalar>(&self, graph: &Graph, binding: &Binding) -> Vec<Array> {
        let mut vals: Vec<Option<Vec<F>>> = vec![None; graph.nodes.len()];
        for (pos, &id) in self.order.iter().enumerate() {
            let node = &graph.nodes[id.index()];
            let out = match &node.op {
                Op::Input(idx) => {
                    let name = &graph.inputs[*idx as usize].0;
                    binding.get(name).unwrap().data.iter().map(|&v| F::of(v)).collect()
                }
                Op::Const(c) => c.values().iter().map(|&v| F::of(v)).collect(),
                op => {
                    let pos = pos as u32;
                    match try_in_place(op, &mut vals, &self.last_use, pos) {
                        Some(v) => v,
                        None => {
                            let ops = op.operands();
                            let args: Vec<&[F]> = ops
                                .as_slice()
                                .iter()
                                .map(|p| vals[p.index()].as_deref().expect("operand evaluated"))
                                .collect();
                            let shapes: Vec<Shape> =
                                ops.as_slice().iter().map(|p| graph.shape(*p)).collect();
                            compute(op, node.shape, &args, &shapes)
                        }
                    }
                }
            };
            debug_assert_eq!(out.len(), node.shape.len(), "{:?}", node.op.kind());
            vals[id.index()] = Some(out);
            for &p in node.op.operands().as_slice() {
                if self.last_use[p.index()] == pos as u32 {
                    vals[p.index()] = None;
                }
            }
        }
        self.outputs
            .iter()
            .map(|o| Array {
                shape: graph.shape(*o),
                data: vals[o.index()].as_ref().unwrap().iter().map(|v| v.widen()).collect(),
            })
            .collect()
    }
}

/// Evaluate a constant-foldable operation in f64.
pub(crate) fn compute_const(op: &Op, shape: Shape, args: &[&[f64]], shapes: &[Shape]) -> Vec<f64> {
    compute::<f64>(op, shape, args, shapes)
}

/// Reuse the buffer of an operand that dies at this node.
fn try_in_place<F: Scalar>(
    op: &Op,
    vals: &mut [Option<Vec<F>>],
    last_use: &[u32],
    pos: u32,
) -> Option<Vec<F>> {
    let dies = |id: NodeId| last_use[id.index()] == pos;
    match *op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) if a != b && (dies(a) || dies(b)) => {
            let (target, other, flipped) = if dies(a) { (a, b, false) } else { (b, a, true) };
            let mut buf = vals[target.index()].take()?;
            let o = vals[other.index()].as_deref()?;
            match op {
                Op::Add(..) => buf.iter_mut().zip(o).for_each(|(x, &y)| *x = *x + y),
                Op::Mul(..) => buf.iter_mut().zip(o).for_each(|(x, &y)| *x = *x * y),
                _ if flipped => buf.iter_mut().zip(o).for_each(|(x, &y)| *x = y - *x),
                _ => buf.iter_mut().zip(o).for_each(|(x, &y)| *x = *x - y),
            }
            Some(buf)
        }
        Op::ScalarMul(s, a) if s != a && dies(a) => {
            let mut buf = vals[a.index()].take()?;
            let c = vals[s.index()].as_deref()?[0];
            buf.iter_mut().for_each(|x| *x = *x * c);
            Some(buf)
        }
        Op::Scale(c, a) if dies(a) => {
            let mut buf = vals[a.index()].take()?;
            let c = F::of(c.get());
            buf.iter_mut().for_each(|x| *x = *x * c);
            Some(buf)
        }
        Op::Offset(c, a) if dies(a) => {
            let mut buf = vals[a.index()].take()?;
            let c = F::of(c.get());
            buf.iter_mut().for_each(|x| *x = *x + c);
            Some(buf)
        }
        Op::Tanh(a) if dies(a) => {
            let mut buf = vals[a.index()].take()?;
            buf.iter_mut().for_each(|x| *x = x.tanh());
            Some(buf)
        }
        Op::Sigmoid(a) if dies(a) => {
            let mut buf = vals[a.index()].take()?;
            buf.iter_mut().for_each(|x| *x = sigmoid(*x));
            Some(buf)
        }
        Op::Alias(a, _) if dies(a) => vals[a.index()].take(),
        Op::Clip01(a) if dies(a) => {
            let mut buf = vals[a.index()].take()?;
            buf.iter_mut().for_each(|x| *x = clip01(*x));
            Some(buf)
        }
        Op::OuterAcc(acc, a, b) if dies(acc) && acc != a && acc != b => {
            let mut buf = vals[acc.index()].take()?;
            let av = vals[a.index()].as_deref()?;
            let bv = vals[b.index()].as_deref()?;
            outer_acc_into(&mut buf, av, bv);
            Some(buf)
        }
        _ => None,
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn clip01<F: Scalar>(x: F) -> F {
    // Written with comparisons so that NaN passes through.
    if x < F::zero() {
        F::zero()
    } else if x > F::one() {
        F::one()
    } else {
        x
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    const L: usize = 8;
    let mut acc = [F::zero(); L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..L {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut s = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    let mut t = F::zero();
    for v in acc {
        t = t + v;
    }
    t + s
}

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

fn outer_acc_into<F: Scalar>(buf: &mut [F], a: &[F], b: &[F]) {
    let n = b.len();
    if n == 0 {
        return;
    }
    for (row, &ai) in buf.chunks_exact_mut(n).zip(a) {
        axpy(row, ai, b);
    }
}

fn map<F: Scalar>(a: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    a.iter().map(|&x| f(x)).collect()
}

fn zip<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn compute<F: Scalar>(op: &Op, shape: Shape, args: &[&[F]], shapes: &[Shape]) -> Vec<F> {
    match *op {
        Op::Input(_) | Op::Const(_) => unreachable!("leaves are bound directly"),
        Op::Add(..) => zip(args[0], args[1], |x, y| x + y),
        Op::Sub(..) => zip(args[0], args[1], |x, y| x - y),
        Op::Mul(..) => zip(args[0], args[1], |x, y| x * y),
        Op::Dot(..) => vec![dot(args[0], args[1])],
        Op::ScalarMul(..) => {
            let c = args[0][0];
            map(args[1], |x| c * x)
        }
        Op::Scale(c, _) => {
            let c = F::of(c.get());
            map(args[0], |x| c * x)
        }
        Op::Offset(c, _) => {
            let c = F::of(c.get());
            map(args[0], |x| x + c)
        }
        Op::Tanh(_) => map(args[0], |x| x.tanh()),
        Op::Sigmoid(_) => map(args[0], sigmoid),
        Op::Softplus(_) => map(args[0], softplus),
        Op::Sum(_) => vec![args[0].iter().fold(F::zero(), |s, &x| s + x)],
        Op::SqNorm(_) => vec![dot(args[0], args[0])],
        Op::Concat(..) => {
            let mut v = Vec::with_capacity(shape.len());
            v.extend_from_slice(args[0]);
            v.extend_from_slice(args[1]);
            v
        }
        Op::Slice(_, start) => args[0][start..start + shape.len()].to_vec(),
        Op::Pad(_, start) => {
            let mut v = vec![F::zero(); shape.len()];
            v[start..start + args[0].len()].copy_from_slice(args[0]);
            v
        }
        Op::MatVec(..) => {
            let cols = shapes[0].cols();
            if cols == 0 {
                return vec![F::zero(); shape.len()];
            }
            args[0].chunks_exact(cols).map(|row| dot(row, args[1])).collect()
        }
        Op::MatTVec(..) => {
            let cols = shapes[0].cols();
            let mut y = vec![F::zero(); cols];
            if cols == 0 {
                return y;
            }
            for (row, &vi) in args[0].chunks_exact(cols).zip(args[1]) {
                axpy(&mut y, vi, row);
            }
            y
        }
        Op::Outer(..) => {
            let mut m = vec![F::zero(); shape.len()];
            outer_acc_into(&mut m, args[0], args[1]);
            m
        }
        Op::OuterAcc(..) => {
            let mut m = args[0].to_vec();
            outer_acc_into(&mut m, args[1], args[2]);
            m
        }
        Op::Broadcast(_) => vec![args[0][0]; shape.len()],
        Op::Clip01(_) => map(args[0], clip01),
        Op::Alias(..) => args[0].to_vec(),
        Op::BoxMask(_) => map(args[0], |x| {
            if x >= F::zero() && x <= F::one() {
                F::one()
            } else {
                F::zero()
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Builder;

    #[test]
    fn square_of_three() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let y = b.mul(x, x).unwrap();
        let g = b.finish(vec![y]);
        let out = g.evaluate(&Binding::new(Precision::F64).with("x", Array::scalar(3.0))).unwrap();
        assert_eq!(out[0].item(), 9.0);
    }

    #[test]
    fn tanh_zero_annihilates() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let y = b.input("y", Shape::SCALAR).unwrap();
        let t = b.tanh(x);
        let p = b.mul(t, y).unwrap();
        let g = b.finish(vec![p]);
        let bind = Binding::new(Precision::F64)
            .with("x", Array::scalar(0.0))
            .with("y", Array::scalar(123.4));
        assert_eq!(g.evaluate(&bind).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn missing_and_misshapen_bindings_name_the_input() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let s = b.sq_norm(x);
        let g = b.finish(vec![s]);
        let err = g.evaluate(&Binding::new(Precision::F64)).unwrap_err();
        assert_eq!(err, TapeError::MissingBinding("x".into()));
        let err = g
            .evaluate(&Binding::new(Precision::F64).with("x", Array::vector(vec![1.0; 3])))
            .unwrap_err();
        assert!(matches!(err, TapeError::BindingShape { ref name, .. } if name == "x"));
    }

    #[test]
    fn in_place_reuse_matches_fresh_evaluation() {
        // x is consumed twice, so only the final add may reuse a buffer.
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(4)).unwrap();
        let t = b.tanh(x);
        let s = b.sigmoid(t);
        let m = b.mul(s, x).unwrap();
        let d = b.sub(x, m).unwrap();
        let g = b.finish(vec![d, t]);
        let xs = vec![0.1, -0.7, 2.0, 0.0];
        let out = g
            .evaluate(&Binding::new(Precision::F64).with("x", Array::vector(xs.clone())))
            .unwrap();
        for (i, &xi) in xs.iter().enumerate() {
            let t = xi.tanh();
            let s = 1.0 / (1.0 + (-t).exp());
            assert!((out[0].data[i] - (xi - s * xi)).abs() < 1e-15);
            assert_eq!(out[1].data[i], t);
        }
    }

    #[test]
    fn matrix_kernels() {
        let mut b = Builder::new();
        let w = b.input("w", Shape::matrix(2, 3)).unwrap();
        let x = b.input("x", Shape::vector(3)).unwrap();
        let v = b.input("v", Shape::vector(2)).unwrap();
        let y = b.matvec(w, x).unwrap();
        let z = b.mat_t_vec(w, v).unwrap();
        let o = b.outer(v, x).unwrap();
        let g = b.finish(vec![y, z, o]);
        let bind = Binding::new(Precision::F64)
            .with("w", Array::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .with("x", Array::vector(vec![1., 0., -1.]))
            .with("v", Array::vector(vec![2., -1.]));
        let out = g.evaluate(&bind).unwrap();
        assert_eq!(out[0].data, vec![-2., -2.]);
        assert_eq!(out[1].data, vec![-2., -1., 0.]);
        assert_eq!(out[2].data, vec![2., 0., -2., -1., 0., 1.]);
    }

    #[test]
    fn f32_and_f64_agree_loosely() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(3)).unwrap();
        let t = b.softplus(x);
        let s = b.sum(t);
        let g = b.finish(vec![s]);
        let xs = Array::vector(vec![-30.0, 0.0, 30.0]);
        let a = g.evaluate(&Binding::new(Precision::F64).with("x", xs.clone())).unwrap()[0].item();
        let c = g.evaluate(&Binding::new(Precision::F32).with("x", xs)).unwrap()[0].item();
        assert!((a - (30.0 + 2f64.ln())).abs() < 1e-9);
        assert!((a - c).abs() < 1e-4);
    }
}
