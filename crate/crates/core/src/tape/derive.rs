use std::collections::HashMap;

use super::{Builder, NodeId, Op, OpKind, Result, Shape, TapeError};

/// Scales every adjoint contribution produced by the rule for `op`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

enum Contribution {
    Node(NodeId),
    Outer(NodeId, NodeId),
}

impl Builder {
    /// Append the reverse-mode gradient of scalar `output` with respect to
    /// each node in `wrt`. Returns one gradient node per entry, shaped like
    /// the corresponding `wrt` node; entries without a path to `output`
    /// get a zero constant.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(TapeError::NonScalarOutput(out_shape));
        }
        let n = output.index() + 1;

        let mut depends = vec![false; n];
        for w in wrt {
            if w.index() < n {
                depends[w.index()] = true;
            }
        }
        for i in 0..n {
            if depends[i] {
                continue;
            }
            let op = &self.graph.nodes[i].op;
            if matches!(op, Op::BoxMask(_)) {
                continue;
            }
            depends[i] = op.operands().as_slice().iter().any(|p| depends[p.index()]);
        }

        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        if depends[output.index()] {
            let one = self.scalar(1.0);
            adjoint.insert(output, one);
        }

        for i in (0..n).rev() {
            let id = NodeId(i as u32);
            let Some(&g) = adjoint.get(&id) else { continue };
            let op = self.graph.nodes[i].op.clone();
            let mut contribs: Vec<(NodeId, Contribution)> = Vec::with_capacity(3);
            self.rule(id, &op, g, &depends, &mut contribs)?;
            let factor = match self.fault {
                Some(f) if f.op == op.kind() => Some(f.factor),
                _ => None,
            };
            for (target, c) in contribs {
                if !depends[target.index()] {
                    continue;
                }
                let c = match (c, factor) {
                    (c, None) => c,
                    (Contribution::Node(v), Some(f)) => Contribution::Node(self.scale(f, v)),
                    (Contribution::Outer(a, b), Some(f)) => Contribution::Outer(self.scale(f, a), b),
                };
                let acc = match (adjoint.get(&target).copied(), c) {
                    (None, Contribution::Node(v)) => v,
                    (None, Contribution::Outer(a, b)) => self.outer(a, b)?,
                    (Some(prev), Contribution::Node(v)) => self.add(prev, v)?,
                    (Some(prev), Contribution::Outer(a, b)) => self.outer_acc(prev, a, b)?,
                };
                adjoint.insert(target, acc);
            }
            // Release the adjoint of interior nodes; keep requested ones.
            if !wrt.contains(&id) {
                adjoint.remove(&id);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w) {
                Some(&g) => g,
                None => {
                    let s = self.shape(*w);
                    self.zeros(s)
                }
            })
            .collect())
    }

    fn rule(
        &mut self,
        id: NodeId,
        op: &Op,
        g: NodeId,
        depends: &[bool],
        out: &mut Vec<(NodeId, Contribution)>,
    ) -> Result<()> {
        use Contribution::{Node, Outer};
        let dep = |x: NodeId| depends[x.index()];
        match *op {
            Op::Input(_) | Op::Const(_) | Op::BoxMask(_) => {}
            Op::Add(a, b) => {
                out.push((a, Node(g)));
                out.push((b, Node(g)));
            }
            Op::Sub(a, b) => {
                out.push((a, Node(g)));
                if dep(b) {
                    out.push((b, Node(self.neg(g))));
                }
            }
            Op::Mul(a, b) => {
                if dep(a) {
                    out.push((a, Node(self.mul(g, b)?)));
                }
                if dep(b) {
                    out.push((b, Node(self.mul(g, a)?)));
                }
            }
            Op::Dot(a, b) => {
                if dep(a) {
                    out.push((a, Node(self.scalar_mul(g, b)?)));
                }
                if dep(b) {
                    out.push((b, Node(self.scalar_mul(g, a)?)));
                }
            }
            Op::ScalarMul(s, a) => {
                if dep(s) {
                    out.push((s, Node(self.dot(g, a)?)));
                }
                if dep(a) {
                    out.push((a, Node(self.scalar_mul(s, g)?)));
                }
            }
            Op::Scale(c, a) => out.push((a, Node(self.scale(c.get(), g)))),
            Op::Offset(_, a) | Op::Alias(a, _) => out.push((a, Node(g))),
            Op::Tanh(a) => {
                let t2 = self.mul(id, id)?;
                let d = self.one_minus(t2);
                out.push((a, Node(self.mul(g, d)?)));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.one_minus(id);
                let d = self.mul(id, one_minus)?;
                out.push((a, Node(self.mul(g, d)?)));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                out.push((a, Node(self.mul(g, s)?)));
            }
            Op::Sum(a) => {
                let s = self.shape(a);
                out.push((a, Node(self.broadcast(g, s)?)));
            }
            Op::SqNorm(a) => {
                let two_a = self.scale(2.0, a);
                out.push((a, Node(self.scalar_mul(g, two_a)?)));
            }
            Op::Concat(a, b) => {
                let na = self.shape(a).len();
                let nb = self.shape(b).len();
                if dep(a) {
                    out.push((a, Node(self.slice(g, 0, na)?)));
                }
                if dep(b) {
                    out.push((b, Node(self.slice(g, na, nb)?)));
                }
            }
            Op::Slice(a, start) => {
                let total = self.shape(a).len();
                out.push((a, Node(self.pad(g, start, total)?)));
            }
            Op::Pad(a, start) => {
                let len = self.shape(a).len();
                out.push((a, Node(self.slice(g, start, len)?)));
            }
            Op::MatVec(w, x) => {
                if dep(w) {
                    out.push((w, Outer(g, x)));
                }
                if dep(x) {
                    out.push((x, Node(self.mat_t_vec(w, g)?)));
                }
            }
            Op::MatTVec(w, v) => {
                if dep(w) {
                    out.push((w, Outer(v, g)));
                }
                if dep(v) {
                    out.push((v, Node(self.matvec(w, g)?)));
                }
            }
            Op::Outer(a, b) => {
                if dep(a) {
                    out.push((a, Node(self.matvec(g, b)?)));
                }
                if dep(b) {
                    out.push((b, Node(self.mat_t_vec(g, a)?)));
                }
            }
            Op::OuterAcc(c, a, b) => {
                out.push((c, Node(g)));
                if dep(a) {
                    out.push((a, Node(self.matvec(g, b)?)));
                }
                if dep(b) {
                    out.push((b, Node(self.mat_t_vec(g, a)?)));
                }
            }
            Op::Broadcast(s) => out.push((s, Node(self.sum(g)))),
            Op::Clip01(a) => {
                let m = self.box_mask(a);
                out.push((a, Node(self.mul(g, m)?)));
            }
        }
        debug_assert!(out.iter().all(|(t, c)| match c {
            Contribution::Node(v) => self.shape(*v) == self.shape(*t),
            Contribution::Outer(a, b) =>
                Shape::matrix(self.shape(*a).len(), self.shape(*b).len()) == self.shape(*t),
        }));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::{Array, Binding, Builder, Precision, Shape};

    fn eval1(g: &crate::tape::Graph, name: &str, v: Array) -> Vec<crate::tape::Array> {
        g.evaluate(&Binding::new(Precision::F64).with(name, v)).unwrap()
    }

    #[test]
    fn derivative_of_square() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let y = b.mul(x, x).unwrap();
        let g = b.finish(vec![y]).derive(&["x"]).unwrap();
        assert_eq!(eval1(&g, "x", Array::scalar(3.0))[0].item(), 6.0);
    }

    #[test]
    fn nested_gradient_norm() {
        // g(x) = ||∇(½xᵀx)||² = ||x||², so ∇g = 2x.
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let sq = b.sq_norm(x);
        let e = b.scale(0.5, sq);
        let gx = b.grad(e, &[x]).unwrap()[0];
        let gn = b.sq_norm(gx);
        let graph = b.finish(vec![gn]);
        assert_eq!(eval1(&graph, "x", Array::vector(vec![1.0, 2.0]))[0].item(), 5.0);
        let d = graph.derive(&["x"]).unwrap();
        assert_eq!(eval1(&d, "x", Array::vector(vec![1.0, 2.0]))[0].data, vec![2.0, 4.0]);
    }

    #[test]
    fn third_order_of_cube() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let x2 = b.mul(x, x).unwrap();
        let x3 = b.mul(x2, x).unwrap();
        let d1 = b.grad(x3, &[x]).unwrap()[0];
        let d2 = b.grad(d1, &[x]).unwrap()[0];
        let d3 = b.grad(d2, &[x]).unwrap()[0];
        let g = b.finish(vec![d1, d2, d3]);
        let out = eval1(&g, "x", Array::scalar(2.0));
        assert_eq!(out[0].item(), 12.0);
        assert_eq!(out[1].item(), 12.0);
        assert_eq!(out[2].item(), 6.0);
    }

    #[test]
    fn derive_rejects_non_scalar_and_unknown_names() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let t = b.tanh(x);
        let g = b.finish(vec![t]);
        assert!(g.derive(&["x"]).is_err());
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let s = b.sum(x);
        let g = b.finish(vec![s]);
        assert!(g.derive(&["nope"]).is_err());
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let _y = b.input("y", Shape::matrix(2, 2)).unwrap();
        let s = b.sum(x);
        let g = b.finish(vec![s]).derive(&["x", "y"]).unwrap();
        let out = g
            .evaluate(&Binding::new(Precision::F64).with("x", Array::vector(vec![1.0, 1.0])))
            .unwrap();
        assert_eq!(out[0].data, vec![1.0, 1.0]);
        assert_eq!(out[1].data, vec![0.0; 4]);
    }
}
