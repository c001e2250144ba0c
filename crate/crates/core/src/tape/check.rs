use super::{Binding, Graph, Plan, Precision, Result, TapeError};

/// Central-difference gradient of the single scalar output with respect to
/// one input: `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` per coordinate.
pub fn finite_diff(graph: &Graph, binding: &Binding, wrt: &str, eps: f64) -> Result<Vec<f64>> {
    if graph.outputs.len() != 1 {
        return Err(TapeError::OutputCount(graph.outputs.len()));
    }
    let out = graph.outputs[0];
    let shape = graph.shape(out);
    if !shape.is_scalar() {
        return Err(TapeError::NonScalarOutput(shape));
    }
    if binding.precision != Precision::F64 {
        return Err(TapeError::PrecisionRequired);
    }
    if graph.input_id(wrt).is_none() {
        return Err(TapeError::UnknownInput(wrt.to_string()));
    }
    let plan = Plan::new(graph, &[out]);
    let mut b = binding.clone();
    let n = b
        .get(wrt)
        .ok_or_else(|| TapeError::MissingBinding(wrt.to_string()))?
        .data
        .len();
    // Validate the binding once before perturbing.
    plan.run(graph, &b)?;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = b.get(wrt).unwrap().data[i];
        b.get_mut(wrt).unwrap().data[i] = x0 + eps;
        let fp = plan.run(graph, &b)?[0].item();
        b.get_mut(wrt).unwrap().data[i] = x0 - eps;
        let fm = plan.run(graph, &b)?[0].item();
        b.get_mut(wrt).unwrap().data[i] = x0;
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference when both are
/// below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Array, Builder, Shape};

    #[test]
    fn square_at_three() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::SCALAR).unwrap();
        let y = b.mul(x, x).unwrap();
        let g = b.finish(vec![y]);
        let fd = finite_diff(&g, &Binding::new(Precision::F64).with("x", Array::scalar(3.0)), "x", 1e-5)
            .unwrap();
        assert!((fd[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_graph_has_zero_difference() {
        let mut b = Builder::new();
        let _x = b.input("x", Shape::vector(3)).unwrap();
        let c = b.scalar(2.5);
        let g = b.finish(vec![c]);
        let fd = finite_diff(
            &g,
            &Binding::new(Precision::F64).with("x", Array::vector(vec![1.0, 2.0, 3.0])),
            "x",
            1e-5,
        )
        .unwrap();
        assert_eq!(fd, vec![0.0; 3]);
    }

    #[test]
    fn requires_scalar_output_and_f64() {
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let t = b.tanh(x);
        let g = b.finish(vec![t]);
        let bind = Binding::new(Precision::F64).with("x", Array::vector(vec![0.0, 0.0]));
        assert!(matches!(finite_diff(&g, &bind, "x", 1e-5), Err(TapeError::NonScalarOutput(_))));
        let mut b = Builder::new();
        let x = b.input("x", Shape::vector(2)).unwrap();
        let s = b.sum(x);
        let g = b.finish(vec![s]);
        let bind = Binding::new(Precision::F32).with("x", Array::vector(vec![0.0, 0.0]));
        assert_eq!(finite_diff(&g, &bind, "x", 1e-5), Err(TapeError::PrecisionRequired));
    }
}
