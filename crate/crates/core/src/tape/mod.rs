//! Reverse-mode automatic differentiation over small array graphs.
//!
//! A [`Graph`] is an immutable, topologically ordered list of elementary
//! operations on arrays of rank 0, 1 or 2. Differentiation is a
//! graph-to-graph transformation: [`Builder::grad`] appends the adjoint
//! computation to the same arena, so the result can be differentiated
//! again to any depth.
//!
//! Nodes are hash-consed on construction, so building the same expression
//! twice yields the same node and shared subexpressions are evaluated once.
//! Operations whose operands are all constants are folded.

mod derive;
mod eval;
mod check;

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

pub use check::{finite_diff, relative_error};
pub use derive::Fault;
pub use eval::{Array, Binding, Plan, Precision, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("missing binding for input `{0}`")]
    MissingBinding(String),
    #[error("binding for `{name}` has shape {got}, graph expects {expected}")]
    BindingShape { name: String, expected: Shape, got: Shape },
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: OpKind, lhs: Shape, rhs: Shape },
    #[error("{op} does not accept an operand of shape {shape}")]
    BadOperand { op: OpKind, shape: Shape },
    #[error("graph output has shape {0}, expected a scalar")]
    NonScalarOutput(Shape),
    #[error("graph has {0} outputs, expected exactly one")]
    OutputCount(usize),
    #[error("`{0}` is not an input of the graph")]
    UnknownInput(String),
    #[error("input `{0}` redeclared with a different shape")]
    InputRedeclared(String),
    #[error("constant has {got} values but shape {shape} needs {}", shape.len())]
    ConstLen { shape: Shape, got: usize },
    #[error("slice {start}..{end} out of range for length {len}")]
    SliceRange { start: usize, end: usize, len: usize },
    #[error("finite differences need a 64-bit binding")]
    PrecisionRequired,
}

pub type Result<T> = std::result::Result<T, TapeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Shape of an array of rank at most two. Matrices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; 2],
    rank: u8,
}

impl Shape {
    pub const SCALAR: Shape = Shape { dims: [1, 1], rank: 0 };

    pub fn vector(n: usize) -> Shape {
        Shape { dims: [n, 1], rank: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Shape {
        Shape { dims: [rows, cols], rank: 2 }
    }

    pub fn from_dims(dims: &[usize]) -> Option<Shape> {
        match dims {
            [] => Some(Shape::SCALAR),
            [n] => Some(Shape::vector(*n)),
            [r, c] => Some(Shape::matrix(*r, *c)),
            _ => None,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn len(&self) -> usize {
        match self.rank {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rank == 0
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank {
            0 => write!(f, "[]"),
            1 => write!(f, "[{}]", self.dims[0]),
            _ => write!(f, "[{}x{}]", self.dims[0], self.dims[1]),
        }
    }
}

/// An f64 compared and hashed by its bit pattern.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bits(u64);

impl Bits {
    fn new(v: f64) -> Self {
        Bits(v.to_bits())
    }

    pub(crate) fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

impl PartialEq for Bits {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}
impl Eq for Bits {}
impl Hash for Bits {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.hash(state)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConstData(Arc<[f64]>);

impl ConstData {
    pub(crate) fn values(&self) -> &[f64] {
        &self.0
    }
}

impl PartialEq for ConstData {
    fn eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
impl Eq for ConstData {}
impl Hash for ConstData {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.len().hash(state);
        for v in self.0.iter() {
            v.to_bits().hash(state);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Dot,
    ScalarMul,
    Scale,
    Offset,
    Tanh,
    Sigmoid,
    Softplus,
    Sum,
    SqNorm,
    Concat,
    Slice,
    Pad,
    MatVec,
    MatTVec,
    Outer,
    OuterAcc,
    Broadcast,
    Clip01,
    BoxMask,
    Alias,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Elementary operations. Output shapes live on the node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Op {
    Input(u32),
    Const(ConstData),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// Inner product of two same-shaped arrays.
    Dot(NodeId, NodeId),
    /// Scalar node times array.
    ScalarMul(NodeId, NodeId),
    Scale(Bits, NodeId),
    Offset(Bits, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    SqNorm(NodeId),
    Concat(NodeId, NodeId),
    Slice(NodeId, usize),
    /// Embed a vector into zeros at an offset.
    Pad(NodeId, usize),
    MatVec(NodeId, NodeId),
    /// Transposed matrix times vector.
    MatTVec(NodeId, NodeId),
    Outer(NodeId, NodeId),
    /// acc + a ⊗ b
    OuterAcc(NodeId, NodeId, NodeId),
    Broadcast(NodeId),
    /// Clip into [0, 1].
    Clip01(NodeId),
    /// 1 where 0 <= x <= 1, else 0. Treated as locally constant.
    BoxMask(NodeId),
    /// Identity under a fresh node; the tag keeps aliases distinct.
    Alias(NodeId, u32),
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Const(_) => OpKind::Const,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Dot(..) => OpKind::Dot,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Sum(_) => OpKind::Sum,
            Op::SqNorm(_) => OpKind::SqNorm,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Pad(..) => OpKind::Pad,
            Op::MatVec(..) => OpKind::MatVec,
            Op::MatTVec(..) => OpKind::MatTVec,
            Op::Outer(..) => OpKind::Outer,
            Op::OuterAcc(..) => OpKind::OuterAcc,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Clip01(_) => OpKind::Clip01,
            Op::BoxMask(_) => OpKind::BoxMask,
            Op::Alias(..) => OpKind::Alias,
        }
    }

    pub(crate) fn operands(&self) -> Operands {
        use Op::*;
        match *self {
            Input(_) | Const(_) => Operands::new(&[]),
            Tanh(a) | Sigmoid(a) | Softplus(a) | Sum(a) | SqNorm(a) | Scale(_, a) | Offset(_, a)
            | Slice(a, _) | Pad(a, _) | Broadcast(a) | Clip01(a) | BoxMask(a)
            | Alias(a, _) => {
                Operands::new(&[a])
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) | ScalarMul(a, b) | Concat(a, b)
            | MatVec(a, b) | MatTVec(a, b) | Outer(a, b) => Operands::new(&[a, b]),
            OuterAcc(c, a, b) => Operands::new(&[c, a, b]),
        }
    }
}

/// Up to three operand ids, stored inline.
#[derive(Clone, Copy)]
pub(crate) struct Operands {
    ids: [NodeId; 3],
    len: u8,
}

impl Operands {
    fn new(ids: &[NodeId]) -> Self {
        let mut out = [NodeId(0); 3];
        out[..ids.len()].copy_from_slice(ids);
        Operands { ids: out, len: ids.len() as u8 }
    }

    pub(crate) fn as_slice(&self) -> &[NodeId] {
        &self.ids[..self.len as usize]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Shape,
}

/// An immutable computation graph with named inputs and one or more outputs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: Vec<(String, NodeId)>,
    pub(crate) outputs: Vec<NodeId>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.index()].shape
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, Shape)> + '_ {
        self.inputs.iter().map(move |(n, id)| (n.as_str(), self.shape(*id)))
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Evaluate every output of the graph.
    pub fn evaluate(&self, binding: &Binding) -> Result<Vec<Array>> {
        Plan::new(self, &self.outputs).run(self, binding)
    }

    /// Differentiate the single scalar output with respect to the named
    /// inputs. The returned graph has one output per name, in order.
    pub fn derive(&self, wrt: &[&str]) -> Result<Graph> {
        if self.outputs.len() != 1 {
            return Err(TapeError::OutputCount(self.outputs.len()));
        }
        let out = self.outputs[0];
        let ids = wrt
            .iter()
            .map(|n| self.input_id(n).ok_or_else(|| TapeError::UnknownInput(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut b = Builder::from_graph(self);
        let grads = b.grad(out, &ids)?;
        Ok(b.finish(grads))
    }
}

/// Incrementally constructs a [`Graph`].
#[derive(Debug, Default)]
pub struct Builder {
    graph: Graph,
    intern: HashMap<(Op, Shape), NodeId>,
    fault: Option<Fault>,
    aliases: u32,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resume building on top of an existing graph.
    pub fn from_graph(g: &Graph) -> Self {
        let mut intern = HashMap::with_capacity(g.nodes.len());
        for (i, n) in g.nodes.iter().enumerate() {
            intern.insert((n.op.clone(), n.shape), NodeId(i as u32));
        }
        Builder {
            graph: Graph { nodes: g.nodes.clone(), inputs: g.inputs.clone(), outputs: Vec::new() },
            intern,
            fault: None,
            aliases: g
                .nodes
                .iter()
                .filter_map(|n| match n.op {
                    Op::Alias(_, t) => Some(t),
                    _ => None,
                })
                .max()
                .unwrap_or(0),
        }
    }

    /// Deliberately corrupt one derivative rule. Used as a negative control
    /// for gradient checking.
    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn finish(mut self, outputs: Vec<NodeId>) -> Graph {
        self.graph.outputs = outputs;
        self.graph
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.graph.nodes[id.index()].shape
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op {
        &self.graph.nodes[id.index()].op
    }

    fn const_values(&self, id: NodeId) -> Option<&[f64]> {
        match self.op(id) {
            Op::Const(c) => Some(c.values()),
            _ => None,
        }
    }

    fn is_const_value(&self, id: NodeId, v: f64) -> bool {
        self.const_values(id).is_some_and(|c| c.iter().all(|&x| x == v))
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let operands = op.operands();
        let ids = operands.as_slice();
        if !ids.is_empty() && ids.iter().all(|&i| matches!(self.op(i), Op::Const(_))) {
            let args: Vec<&[f64]> = ids.iter().map(|&i| self.const_values(i).unwrap()).collect();
            let shapes: Vec<Shape> = ids.iter().map(|&i| self.shape(i)).collect();
            let v = eval::compute_const(&op, shape, &args, &shapes);
            return self.push_raw(Op::Const(ConstData(v.into())), shape);
        }
        self.push_raw(op, shape)
    }

    fn push_raw(&mut self, op: Op, shape: Shape) -> NodeId {
        let key = (op, shape);
        if let Some(&id) = self.intern.get(&key) {
            return id;
        }
        let id = NodeId(self.graph.nodes.len() as u32);
        self.graph.nodes.push(Node { op: key.0.clone(), shape });
        self.intern.insert(key, id);
        id
    }

    /// Node of a previously declared leaf.
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.graph.input_id(name)
    }

    /// Declare (or look up) a named leaf.
    pub fn input(&mut self, name: &str, shape: Shape) -> Result<NodeId> {
        if let Some((_, id)) = self.graph.inputs.iter().find(|(n, _)| n == name) {
            if self.shape(*id) != shape {
                return Err(TapeError::InputRedeclared(name.to_string()));
            }
            return Ok(*id);
        }
        let idx = self.graph.inputs.len() as u32;
        let id = self.push_raw(Op::Input(idx), shape);
        self.graph.inputs.push((name.to_string(), id));
        Ok(id)
    }

    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<NodeId> {
        if values.len() != shape.len() {
            return Err(TapeError::ConstLen { shape, got: values.len() });
        }
        Ok(self.push_raw(Op::Const(ConstData(values.into())), shape))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push_raw(Op::Const(ConstData(vec![v].into())), Shape::SCALAR)
    }

    pub fn fill(&mut self, shape: Shape, v: f64) -> NodeId {
        self.push_raw(Op::Const(ConstData(vec![v; shape.len()].into())), shape)
    }

    pub fn zeros(&mut self, shape: Shape) -> NodeId {
        self.fill(shape, 0.0)
    }

    fn same_shape(&self, op: OpKind, a: NodeId, b: NodeId) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn vector_operand(&self, op: OpKind, a: NodeId) -> Result<usize> {
        let s = self.shape(a);
        if s.rank() != 1 {
            return Err(TapeError::BadOperand { op, shape: s });
        }
        Ok(s.len())
    }

    fn matrix_operand(&self, op: OpKind, a: NodeId) -> Result<Shape> {
        let s = self.shape(a);
        if s.rank() != 2 {
            return Err(TapeError::BadOperand { op, shape: s });
        }
        Ok(s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(OpKind::Add, a, b)?;
        if self.is_const_value(a, 0.0) {
            return Ok(b);
        }
        if self.is_const_value(b, 0.0) {
            return Ok(a);
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(OpKind::Sub, a, b)?;
        if self.is_const_value(b, 0.0) {
            return Ok(a);
        }
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(OpKind::Mul, a, b)?;
        if self.is_const_value(a, 1.0) {
            return Ok(b);
        }
        if self.is_const_value(b, 1.0) {
            return Ok(a);
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(OpKind::Dot, a, b)?;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Ok(self.push(Op::Dot(a, b), Shape::SCALAR))
    }

    /// Scalar node `s` times array `a`.
    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        let ss = self.shape(s);
        if !ss.is_scalar() {
            return Err(TapeError::BadOperand { op: OpKind::ScalarMul, shape: ss });
        }
        if let Some(&[c]) = self.const_values(s) {
            return Ok(self.scale(c, a));
        }
        if self.shape(a).is_scalar() {
            return self.mul(s, a);
        }
        let shape = self.shape(a);
        Ok(self.push(Op::ScalarMul(s, a), shape))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        if c == 1.0 {
            return a;
        }
        if let Op::Scale(d, inner) = *self.op(a) {
            return self.scale(c * d.get(), inner);
        }
        let shape = self.shape(a);
        self.push(Op::Scale(Bits::new(c), a), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(-1.0, a)
    }

    /// Add a compile-time constant to every element.
    pub fn offset(&mut self, c: f64, a: NodeId) -> NodeId {
        if c == 0.0 {
            return a;
        }
        let shape = self.shape(a);
        self.push(Op::Offset(Bits::new(c), a), shape)
    }

    /// 1 - a
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.neg(a);
        self.offset(1.0, n)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Tanh(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Softplus(a), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        if self.shape(a).is_scalar() {
            return a;
        }
        self.push(Op::Sum(a), Shape::SCALAR)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SqNorm(a), Shape::SCALAR)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.vector_operand(OpKind::Concat, a)?;
        let nb = self.vector_operand(OpKind::Concat, b)?;
        Ok(self.push(Op::Concat(a, b), Shape::vector(na + nb)))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.vector_operand(OpKind::Slice, a)?;
        if start + len > n {
            return Err(TapeError::SliceRange { start, end: start + len, len: n });
        }
        if start == 0 && len == n {
            return Ok(a);
        }
        Ok(self.push(Op::Slice(a, start), Shape::vector(len)))
    }

    /// Place vector `a` at `start` inside a zero vector of length `total`.
    pub fn pad(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let n = self.vector_operand(OpKind::Pad, a)?;
        if start + n > total {
            return Err(TapeError::SliceRange { start, end: start + n, len: total });
        }
        if start == 0 && n == total {
            return Ok(a);
        }
        Ok(self.push(Op::Pad(a, start), Shape::vector(total)))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let sw = self.matrix_operand(OpKind::MatVec, w)?;
        let n = self.vector_operand(OpKind::MatVec, x)?;
        if sw.cols() != n {
            return Err(TapeError::ShapeMismatch { op: OpKind::MatVec, lhs: sw, rhs: self.shape(x) });
        }
        Ok(self.push(Op::MatVec(w, x), Shape::vector(sw.rows())))
    }

    pub fn mat_t_vec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let sw = self.matrix_operand(OpKind::MatTVec, w)?;
        let n = self.vector_operand(OpKind::MatTVec, v)?;
        if sw.rows() != n {
            return Err(TapeError::ShapeMismatch { op: OpKind::MatTVec, lhs: sw, rhs: self.shape(v) });
        }
        Ok(self.push(Op::MatTVec(w, v), Shape::vector(sw.cols())))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.vector_operand(OpKind::Outer, a)?;
        let n = self.vector_operand(OpKind::Outer, b)?;
        Ok(self.push(Op::Outer(a, b), Shape::matrix(m, n)))
    }

    /// `acc + a ⊗ b`
    pub fn outer_acc(&mut self, acc: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.vector_operand(OpKind::OuterAcc, a)?;
        let n = self.vector_operand(OpKind::OuterAcc, b)?;
        let sc = self.shape(acc);
        if sc != Shape::matrix(m, n) {
            return Err(TapeError::ShapeMismatch { op: OpKind::OuterAcc, lhs: sc, rhs: Shape::matrix(m, n) });
        }
        if self.is_const_value(acc, 0.0) {
            return self.outer(a, b);
        }
        Ok(self.push(Op::OuterAcc(acc, a, b), sc))
    }

    pub fn broadcast(&mut self, s: NodeId, shape: Shape) -> Result<NodeId> {
        let ss = self.shape(s);
        if !ss.is_scalar() {
            return Err(TapeError::BadOperand { op: OpKind::Broadcast, shape: ss });
        }
        if shape.is_scalar() {
            return Ok(s);
        }
        Ok(self.push(Op::Broadcast(s), shape))
    }

    pub fn clip01(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Clip01(a), shape)
    }

    pub fn box_mask(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::BoxMask(a), shape)
    }

    /// A fresh node equal to `a`. Differentiating with respect to the alias
    /// gives the partial derivative along paths through this node only,
    /// leaving out any other dependence on `a`.
    pub fn alias(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.aliases += 1;
        self.push_raw(Op::Alias(a, self.aliases), shape)
    }

    /// `w·x + b` for a weight matrix and bias vector.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }
}
