//! Reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Graph`] is built node by node with shape checks at construction time,
//! evaluated against named [`Bindings`], and differentiated with
//! [`Graph::backward`]. [`finite_difference_grad`] is the independent
//! central-difference oracle used to validate every backward rule.

mod array;
mod graph;
pub mod kernels;

use thiserror::Error;

pub use array::{DenseArray, Real};
pub use graph::{Bindings, Evaluation, Gradients, Graph, NodeId, Op};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error at node #{node} ({op}): {detail}")]
    Structural {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node #{node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("{0}")]
    Usage(String),
}

/// Central-difference estimate of d(output)/d(input `param`), one component
/// at a time.
pub fn finite_difference_grad<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    output: NodeId,
    param: &str,
    h: T,
) -> Result<DenseArray<T>, NumericsError> {
    if graph.shape(output) != [1] {
        return Err(NumericsError::Usage(format!(
            "finite differences need a scalar output, node #{} has shape {:?}",
            output.index(),
            graph.shape(output)
        )));
    }
    if h <= T::zero() {
        return Err(NumericsError::Usage("step h must be positive".into()));
    }
    let base = bindings
        .get(param)
        .ok_or_else(|| NumericsError::Usage(format!("input '{param}' is not bound")))?;
    let mut probe = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    let two_h = h + h;
    for i in 0..base.len() {
        let original = base.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = eval_with(graph, bindings, param, &probe, output)?;
        probe.data_mut()[i] = original - h;
        let minus = eval_with(graph, bindings, param, &probe, output)?;
        probe.data_mut()[i] = original;
        grad.push((plus - minus) / two_h);
    }
    DenseArray::new(base.shape().to_vec(), grad)
}

fn eval_with<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    param: &str,
    value: &DenseArray<T>,
    output: NodeId,
) -> Result<T, NumericsError> {
    let mut local = Bindings::new();
    for name in graph.input_names() {
        if name == param {
            continue;
        }
        if let Some(v) = bindings.get(name) {
            local.insert(name, v);
        }
    }
    local.insert(param, value);
    Ok(graph.evaluate(&local)?.scalar(output))
}

/// `|a - b| / max(|a|, |b|, floor)`, the comparison used for gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        DenseArray::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph = Graph::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let b = g.input("b", &[2, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let av = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let bv = DenseArray::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let ev = g.evaluate(&Bindings::new().bind("a", &av).bind("b", &bv)).unwrap();
        assert_eq!(ev.value(c).data(), &[2.0, 3.0]);
        assert_eq!(ev.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let xv = DenseArray::vector(vec![0.0, 0.0, 0.0]);
        let ev = g.evaluate(&Bindings::new().bind("x", &xv)).unwrap();
        for &v in ev.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let gain = g.input("g", &[3]).unwrap();
        let bias = g.input("b", &[3]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let xv = DenseArray::vector(vec![1.0, 2.0, 3.0]);
        let gv = DenseArray::vector(vec![1.0; 3]);
        let bv = DenseArray::vector(vec![0.0; 3]);
        let ev = g
            .evaluate(&Bindings::new().bind("x", &xv).bind("g", &gv).bind("b", &bv))
            .unwrap();
        // mean 2, biased variance 2/3
        let denom = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [-1.0 / denom, 0.0, 1.0 / denom];
        for (v, e) in ev.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-14, "{v} vs {e}");
        }
    }

    #[test]
    fn square_derivative() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let xv = DenseArray::scalar(3.0);
        let b = Bindings::new().bind("x", &xv);
        let ev = g.evaluate(&b).unwrap();
        assert_eq!(ev.scalar(y), 9.0);
        let grads = g.backward(&ev, y, None).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
        let fd = finite_difference_grad(&g, &b, y, "x", 1e-5).unwrap();
        assert!((fd.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn exp_finite_difference_at_zero() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.exp(x);
        let xv = DenseArray::scalar(0.0);
        let fd = finite_difference_grad(&g, &Bindings::new().bind("x", &xv), y, "x", 1e-5).unwrap();
        assert!((fd.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_of_softmax_sum_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[2, 5]).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let total = g.sum(s);
        let xv = randn(&mut rng, &[2, 5]);
        let ev = g.evaluate(&Bindings::new().bind("x", &xv)).unwrap();
        let grads = g.backward(&ev, total, None).unwrap();
        for &v in grads.get("x").unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g: Graph = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        match err {
            NumericsError::Structural { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bound_shape_mismatch_is_structural() {
        let mut g: Graph = Graph::new();
        g.input("a", &[2]).unwrap();
        let wrong = DenseArray::vector(vec![1.0, 2.0, 3.0]);
        let err = g.evaluate(&Bindings::new().bind("a", &wrong)).unwrap_err();
        assert!(matches!(err, NumericsError::Structural { node: 0, .. }));
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let e = g.exp(x);
        let _ = g.exp(e);
        let xv = DenseArray::scalar(10.0);
        let err = g.evaluate(&Bindings::new().bind("x", &xv)).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { node: 2, op: "exp" });
    }

    #[test]
    fn unbound_input_is_usage_error() {
        let mut g: Graph = Graph::new();
        g.input("x", &[1]).unwrap();
        assert!(matches!(
            g.evaluate(&Bindings::new()),
            Err(NumericsError::Usage(_))
        ));
    }

    #[test]
    fn backward_needs_matching_evaluation() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let mut other: Graph = Graph::new();
        let ox = other.input("x", &[1]).unwrap();
        let _ = other.mul(ox, ox).unwrap();
        let xv = DenseArray::scalar(1.0);
        let ev = other.evaluate(&Bindings::new().bind("x", &xv)).unwrap();
        assert!(matches!(g.backward(&ev, y, None), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn finite_difference_rejects_vector_output() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.exp(x);
        let xv = DenseArray::vector(vec![0.0, 1.0]);
        assert!(matches!(
            finite_difference_grad(&g, &Bindings::new().bind("x", &xv), y, "x", 1e-5),
            Err(NumericsError::Usage(_))
        ));
    }

    #[test]
    fn evaluate_is_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[4, 6]).unwrap();
        let w = g.input("w", &[6, 3]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax_rows(h).unwrap();
        let xv = randn(&mut rng, &[4, 6]);
        let wv = randn(&mut rng, &[6, 3]);
        let b = Bindings::new().bind("x", &xv).bind("w", &wv);
        let first = g.evaluate(&b).unwrap();
        let second = g.evaluate(&b).unwrap();
        let bits = |a: &DenseArray| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(first.value(s)), bits(second.value(s)));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut g: Graph = Graph::new();
            let x = g.input("x", &[5, 7]).unwrap();
            let gain = g.constant(DenseArray::vector(vec![1.0; 7]));
            let bias = g.constant(DenseArray::vector(vec![0.0; 7]));
            let s = g.softmax_rows(x).unwrap();
            let ln = g.layer_norm(x, gain, bias).unwrap();
            let xv = randn(&mut rng, &[5, 7]).map(|v| v * 10.0);
            let ev = g.evaluate(&Bindings::new().bind("x", &xv)).unwrap();
            for row in ev.value(s).data().chunks(7) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            for (out, inp) in ev.value(ln).data().chunks(7).zip(xv.data().chunks(7)) {
                let moments = |r: &[f64]| {
                    let mean = r.iter().sum::<f64>() / 7.0;
                    (mean, r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0)
                };
                let (mean, var) = moments(out);
                let (_, var_in) = moments(inp);
                assert!(mean.abs() <= 1e-10);
                // eps pulls the variance to var/(var + eps)
                assert!((var - var_in / (var_in + 1e-5)).abs() <= 1e-12);
                if var_in >= 10.0 {
                    assert!((var - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    /// Builds a scalar loss around a single primitive so every backward rule
    /// is exercised against finite differences.
    fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Graph, NodeId, Vec<(String, DenseArray)>)> {
        let mut cases = Vec::new();
        let mut push = |name: &'static str,
                        build: &dyn Fn(&mut Graph) -> NodeId,
                        inputs: Vec<(&str, DenseArray)>| {
            let mut g: Graph = Graph::new();
            for (n, v) in &inputs {
                g.input(n, v.shape()).unwrap();
            }
            let out = build(&mut g);
            let weights = g.constant(DenseArray::new(g.shape(out).to_vec(), (0..g.shape(out).iter().product::<usize>()).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap());
            let weighted = g.mul(out, weights).unwrap();
            let loss = g.sum(weighted);
            cases.push((name, g, loss, inputs.into_iter().map(|(n, v)| (n.to_string(), v)).collect()));
        };
        let id = |g: &Graph, n: &str| g.input_id(n).unwrap();
        push("matmul", &|g| g.matmul(id(g, "a"), id(g, "b")).unwrap(), vec![("a", randn(rng, &[3, 4])), ("b", randn(rng, &[4, 2]))]);
        push("transpose", &|g| g.transpose(id(g, "a")).unwrap(), vec![("a", randn(rng, &[3, 4]))]);
        push("add", &|g| g.add(id(g, "a"), id(g, "b")).unwrap(), vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[2, 3]))]);
        push("sub", &|g| g.sub(id(g, "a"), id(g, "b")).unwrap(), vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[2, 3]))]);
        push("mul", &|g| g.mul(id(g, "a"), id(g, "b")).unwrap(), vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[2, 3]))]);
        push("add_bias", &|g| g.add_bias(id(g, "a"), id(g, "b")).unwrap(), vec![("a", randn(rng, &[3, 4])), ("b", randn(rng, &[4]))]);
        push("scale", &|g| g.scale(id(g, "a"), -1.7), vec![("a", randn(rng, &[2, 2]))]);
        push("exp_scale", &|g| g.exp_scale(id(g, "a"), id(g, "s")).unwrap(), vec![("a", randn(rng, &[2, 3])), ("s", randn(rng, &[1]))]);
        push("exp", &|g| g.exp(id(g, "a")), vec![("a", randn(rng, &[2, 3]))]);
        push("gelu", &|g| g.gelu(id(g, "a")), vec![("a", randn(rng, &[3, 3]))]);
        push("softmax_rows", &|g| g.softmax_rows(id(g, "a")).unwrap(), vec![("a", randn(rng, &[3, 4]))]);
        push("logsumexp_rows", &|g| g.logsumexp_rows(id(g, "a")).unwrap(), vec![("a", randn(rng, &[3, 4]))]);
        push("layer_norm", &|g| g.layer_norm(id(g, "a"), id(g, "gain"), id(g, "bias")).unwrap(), vec![("a", randn(rng, &[3, 5])), ("gain", randn(rng, &[5])), ("bias", randn(rng, &[5]))]);
        push("embedding", &|g| g.embedding(id(g, "t"), vec![2, 0, 2, 3]).unwrap(), vec![("t", randn(rng, &[4, 3]))]);
        push("slice_rows", &|g| g.slice_rows(id(g, "a"), 1, 2).unwrap(), vec![("a", randn(rng, &[4, 3]))]);
        push("slice_cols", &|g| g.slice_cols(id(g, "a"), 1, 2).unwrap(), vec![("a", randn(rng, &[4, 3]))]);
        push("concat_rows", &|g| g.concat_rows(vec![id(g, "a"), id(g, "b"), id(g, "a")]).unwrap(), vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[1, 3]))]);
        push("concat_cols", &|g| g.concat_cols(vec![id(g, "a"), id(g, "b")]).unwrap(), vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[2, 1]))]);
        push("gather_rows", &|g| g.gather_rows(id(g, "a"), vec![3, 1, 3]).unwrap(), vec![("a", randn(rng, &[4, 2]))]);
        push("l2_normalize_rows", &|g| g.l2_normalize_rows(id(g, "a")).unwrap(), vec![("a", randn(rng, &[3, 4]))]);
        push("diagonal", &|g| g.diagonal(id(g, "a")).unwrap(), vec![("a", randn(rng, &[3, 3]))]);
        push("mean", &|g| g.mean(id(g, "a")), vec![("a", randn(rng, &[3, 3]))]);
        cases
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..5 {
            for (name, g, loss, inputs) in primitive_cases(&mut rng) {
                let mut b = Bindings::new();
                for (n, v) in &inputs {
                    b.insert(n, v);
                }
                let ev = g.evaluate(&b).unwrap();
                let grads = g.backward(&ev, loss, None).unwrap();
                for (n, _) in &inputs {
                    let fd = finite_difference_grad(&g, &b, loss, n, 1e-5).unwrap();
                    let an = grads.get(n).unwrap();
                    for (a, f) in an.data().iter().zip(fd.data()) {
                        let err = relative_error(*a, *f, 1e-6);
                        assert!(err <= 1e-4, "{name}/{n} round {round}: {a} vs {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn non_scalar_output_requires_seed() {
        let mut g: Graph = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.exp(x);
        let xv = DenseArray::vector(vec![0.0, 1.0]);
        let ev = g.evaluate(&Bindings::new().bind("x", &xv)).unwrap();
        assert!(g.backward(&ev, y, None).is_err());
        let seed = DenseArray::vector(vec![1.0, 2.0]);
        let grads = g.backward(&ev, y, Some(&seed)).unwrap();
        let gx = grads.get("x").unwrap().data();
        assert!((gx[0] - 1.0).abs() < 1e-15);
        assert!((gx[1] - 2.0 * 1f64.exp()).abs() < 1e-12);
    }
}
