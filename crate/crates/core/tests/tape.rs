use attractor_mem::tape::{finite_diff, relative_error, Array, Binding, Builder, Graph, Plan, Precision, Shape};
use proptest::prelude::*;

fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, n)
}

/// f(x) = cᵀ tanh(Wx + b) + s · softplus(xᵀx) − sum(sigmoid(x))
fn smooth(n: usize) -> Graph {
    let mut b = Builder::new();
    let x = b.input("x", Shape::vector(n)).unwrap();
    let w = b.input("w", Shape::matrix(n, n)).unwrap();
    let bias = b.input("b", Shape::vector(n)).unwrap();
    let c = b.input("c", Shape::vector(n)).unwrap();
    let s = b.input("s", Shape::SCALAR).unwrap();
    let h = b.affine(w, x, bias).unwrap();
    let h = b.tanh(h);
    let t = b.dot(c, h).unwrap();
    let q = b.sq_norm(x);
    let q = b.softplus(q);
    let q = b.scalar_mul(s, q).unwrap();
    let g = b.sigmoid(x);
    let g = b.sum(g);
    let f = b.add(t, q).unwrap();
    let f = b.sub(f, g).unwrap();
    b.finish(vec![f])
}

fn bind(n: usize, x: &[f64], w: &[f64], bias: &[f64], c: &[f64], s: f64) -> Binding {
    let mut bd = Binding::new(Precision::F64);
    bd.set("x", Array::vector(x.to_vec()));
    bd.set("w", Array::matrix(n, n, w.to_vec()).unwrap());
    bd.set("b", Array::vector(bias.to_vec()));
    bd.set("c", Array::vector(c.to_vec()));
    bd.set("s", Array::scalar(s));
    bd
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reverse_mode_matches_central_differences(x in vecs(4), w in vecs(16), bias in vecs(4), c in vecs(4), s in -1.0f64..1.0) {
        let g = smooth(4);
        let bd = bind(4, &x, &w, &bias, &c, s);
        let d = g.derive(&["x", "w", "s"]).unwrap();
        let analytic: Vec<f64> = d.evaluate(&bd).unwrap().into_iter().flat_map(|a| a.data).collect();
        let mut numeric = finite_diff(&g, &bd, "x", 1e-5).unwrap();
        numeric.extend(finite_diff(&g, &bd, "w", 1e-5).unwrap());
        numeric.extend(finite_diff(&g, &bd, "s", 1e-5).unwrap());
        prop_assert!(relative_error(&analytic, &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn nested_gradient_matches_central_differences(x in vecs(3), w in vecs(9), bias in vecs(3), c in vecs(3), s in -1.0f64..1.0) {
        let mut b = Builder::from_graph(&smooth(3));
        let f = smooth(3).outputs()[0];
        let x_id = b.input_id("x").unwrap();
        let gx = b.grad(f, &[x_id]).unwrap()[0];
        let n = b.sq_norm(gx);
        let g = b.finish(vec![n]);
        let bd = bind(3, &x, &w, &bias, &c, s);
        let d = g.derive(&["w", "c"]).unwrap();
        let analytic: Vec<f64> = d.evaluate(&bd).unwrap().into_iter().flat_map(|a| a.data).collect();
        let mut numeric = finite_diff(&g, &bd, "w", 1e-5).unwrap();
        numeric.extend(finite_diff(&g, &bd, "c", 1e-5).unwrap());
        prop_assert!(relative_error(&analytic, &numeric, 1e-6) < 1e-5);
    }

    #[test]
    fn elementwise_derivatives_have_closed_forms(v in -6.0f64..6.0) {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let outs: Vec<_> = [0, 1, 2].iter().map(|&k| {
            let y = match k { 0 => b.tanh(x), 1 => b.sigmoid(x), _ => b.softplus(x) };
            b.grad(y, &[x]).unwrap()[0]
        }).collect();
        let g = b.finish(outs);
        let r = g.evaluate(&Binding::new(Precision::F64).with("x", Array::scalar(v))).unwrap();
        let sig = 1.0 / (1.0 + (-v).exp());
        prop_assert!((r[0].item() - (1.0 - v.tanh().powi(2))).abs() < 1e-14);
        prop_assert!((r[1].item() - sig * (1.0 - sig)).abs() < 1e-14);
        prop_assert!((r[2].item() - sig).abs() < 1e-14);
    }

    #[test]
    fn projection_passes_gradient_only_inside(v in -1.0f64..2.0) {
        prop_assume!(v != 0.0 && v != 1.0);
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(1)).unwrap();
        let c = b.clip01(x);
        let s = b.sum(c);
        let g = b.grad(s, &[x]).unwrap()[0];
        let graph = b.finish(vec![c, g]);
        let r = graph.evaluate(&Binding::new(Precision::F64).with("x", Array::vector(vec![v]))).unwrap();
        prop_assert_eq!(r[0].data[0], v.clamp(0.0, 1.0));
        prop_assert_eq!(r[1].data[0], if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
    }

    #[test]
    fn compiled_plans_are_repeatable(x in vecs(5), w in vecs(25), bias in vecs(5), c in vecs(5), s in -1.0f64..1.0) {
        let g = smooth(5).derive(&["x", "w"]).unwrap();
        let plan = Plan::new(&g, g.outputs());
        let bd = bind(5, &x, &w, &bias, &c, s);
        let a = plan.run(&g, &bd).unwrap();
        let b = plan.run(&g, &bd).unwrap();
        let fresh = g.evaluate(&bd).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &fresh);
    }
}

#[test]
fn identical_subexpressions_are_shared() {
    let mut b = Builder::new();
    let x = b.input("x", Shape::vector(3)).unwrap();
    let a1 = b.tanh(x);
    let n = b.len();
    let a2 = b.tanh(x);
    assert_eq!(a1, a2);
    assert_eq!(b.len(), n);
}
