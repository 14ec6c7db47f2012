//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is assembled once from leaves (named inputs, named parameters,
//! constants) and primitive applications, then evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`]. Every
//! primitive checks shapes at build time and finiteness at run time.
//! [`grad_check`] compares the analytic gradients with central differences.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("input `{0}` was not fed")]
    MissingInput(String),
    #[error("no input or parameter named `{0}`")]
    UnknownName(String),
    #[error("name `{0}` is already declared")]
    DuplicateName(String),
    #[error("backward requested before forward")]
    NotEvaluated,
    #[error("graph has no designated output")]
    NoOutput,
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn param(g: &mut Graph, name: &str, t: Tensor) -> NodeId {
        g.param(name, Arc::new(t)).unwrap()
    }

    #[test]
    fn dot_product_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 2]).unwrap();
        let y = g.input("y", &[2, 1]).unwrap();
        let out = g.matmul(x, y).unwrap();
        g.set_output(out);
        let xv = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let yv = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        g.forward(&[("x", &xv), ("y", &yv)]).unwrap();
        assert_eq!(g.output_value().unwrap().item(), 11.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let s = g.softmax(x).unwrap();
        g.forward(&[("x", &Tensor::zeros(&[3]))]).unwrap();
        for v in g.value(s).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let s = g.sigmoid(x);
        g.forward(&[("x", &Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(g.value(s).unwrap().item(), 0.5);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = param(&mut g, "x", Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.set_output(sq);
        g.forward(&[]).unwrap();
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.params["x"].item(), 6.0);
        assert!(grad_check(&g, &[], 1e-4).unwrap().passed());
    }

    #[test]
    fn softmax_jacobian_first_component() {
        // d softmax(x)_0 / dx at x = 0: s0(1 - s0) = 0.25, -s0 s1 = -0.25
        let mut g = Graph::new();
        let x = param(&mut g, "x", Tensor::zeros(&[2]));
        let s = g.softmax(x).unwrap();
        let first = g.gather_rows(s, vec![0]).unwrap();
        let out = g.sum(first);
        g.set_output(out);
        g.forward(&[]).unwrap();
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        let d = grads.params["x"].data();
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = param(&mut g, "x", Tensor::scalar(1.0));
        g.set_output(x);
        assert_eq!(g.backward(&Tensor::scalar(1.0)).unwrap_err(), DiffError::NotEvaluated);
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
        let c = g.input("c", &[3, 2]).unwrap();
        assert!(g.add(a, c).is_err());
        g.set_output(a);
        let wrong = Tensor::zeros(&[3, 3]);
        let ok = Tensor::zeros(&[2, 3]);
        let err = g.forward(&[("a", &wrong), ("b", &ok), ("c", &Tensor::zeros(&[3, 2]))]);
        assert!(matches!(err, Err(DiffError::ShapeMismatch { .. })));
        assert!(matches!(g.forward(&[("a", &ok)]), Err(DiffError::MissingInput(_))));
    }

    #[test]
    fn non_finite_intermediate_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let l = g.ln(x);
        g.set_output(l);
        let err = g.forward(&[("x", &Tensor::zeros(&[1]))]).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "ln", .. }));
    }

    #[test]
    fn non_scalar_output_rejected_by_grad_check() {
        let mut g = Graph::new();
        let x = param(&mut g, "x", Tensor::zeros(&[2]));
        g.set_output(x);
        assert!(matches!(grad_check(&g, &[], 1e-4), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn zero_norm_row_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]).unwrap();
        g.normalize_rows(x).unwrap();
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.forward(&[("x", &t)]).unwrap_err(), DiffError::ZeroNorm { row: 1 });
    }

    #[test]
    fn two_layer_perceptron_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.input("x", &[5, 4]).unwrap();
        let w1 = param(&mut g, "w1", rand_tensor(&mut rng, &[4, 6]));
        let b1 = param(&mut g, "b1", rand_tensor(&mut rng, &[6]));
        let w2 = param(&mut g, "w2", rand_tensor(&mut rng, &[6, 1]));
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.relu(h);
        let o = g.matmul(h, w2).unwrap();
        let o = g.sigmoid(o);
        let loss = g.mean(o);
        g.set_output(loss);
        let xv = rand_tensor(&mut rng, &[5, 4]);
        let report = grad_check(&g, &[("x", &xv)], 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    /// Exercises every primitive's backward through one scalar objective.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut g = Graph::new();
            let a = param(&mut g, "a", rand_tensor(&mut rng, &[3, 4]));
            let b = param(&mut g, "b", rand_tensor(&mut rng, &[4, 3]));
            let r = param(&mut g, "r", rand_tensor(&mut rng, &[4]));
            let table = param(&mut g, "table", rand_tensor(&mut rng, &[5, 3]));
            let c = g.constant(rand_tensor(&mut rng, &[3, 3]));

            let ab = g.matmul(a, b).unwrap(); // 3x3
            let ar = g.add_row(a, r).unwrap(); // 3x4
            let t = g.transpose(ar).unwrap(); // 4x3
            let cat = g.concat(&[ab, c], 0).unwrap(); // 6x3
            let cat2 = g.concat(&[ab, c], 1).unwrap(); // 3x6
            let s = g.softmax(cat2).unwrap();
            let ls = g.log_softmax(cat).unwrap();
            let sl = g.slice_cols(s, 1, 3).unwrap(); // 3x3
            let gathered = g.gather_rows(table, vec![0, 4, 4]).unwrap(); // 3x3 (repeats)
            let m = g.mul(sl, gathered).unwrap();
            let sub = g.sub(m, ab).unwrap();
            let sig = g.sigmoid(sub);
            let rel = g.relu(sub);
            let e = g.exp(rel);
            let shifted = g.add_scalar(sig, 0.5);
            let l = g.ln(shifted);
            let cl = g.clamp(l, -10.0, 10.0);
            let nr = g.normalize_rows(t).unwrap(); // 4x3
            let rs = g.reshape(nr, &[3, 4]).unwrap();
            let rowsum = g.sum_last(rs).unwrap(); // 3
            let top = g.topk_mean(ls, 2).unwrap(); // 6
            let p1 = g.sum(cl);
            let p2 = g.mean(e);
            let p3 = g.sum(rowsum);
            let p4 = g.mean(top);
            let p4 = g.scale(p4, 1.7);
            let total = g.add(p1, p2).unwrap();
            let total = g.add(total, p3).unwrap();
            let total = g.add(total, p4).unwrap();
            g.set_output(total);
            let report = grad_check(&g, &[], 1e-4).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn tracked_inputs_report_gradients() {
        let mut g = Graph::new();
        let x = g.input_tracked("x", &[3]).unwrap();
        let y = g.input("y", &[3]).unwrap();
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        g.set_output(s);
        let xv = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let yv = Tensor::vector(vec![4.0, 5.0, 6.0]);
        g.forward(&[("x", &xv), ("y", &yv)]).unwrap();
        let grads = g.backward(&Tensor::scalar(2.0)).unwrap();
        assert_eq!(grads.inputs["x"].data(), &[8.0, 10.0, 12.0]);
        assert!(!grads.inputs.contains_key("y"));
    }

    #[test]
    fn forward_and_backward_are_bit_identical_on_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let build = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let w = param(&mut g, "w", rand_tensor(rng, &[6, 6]));
            let x = g.input("x", &[4, 6]).unwrap();
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h).unwrap();
            let out = g.mean(s);
            g.set_output(out);
            g
        };
        let mut g = build(&mut rng);
        let x = rand_tensor(&mut rng, &[4, 6]);
        g.forward(&[("x", &x)]).unwrap();
        let first = g.backward(&Tensor::scalar(1.0)).unwrap();
        let v1 = g.output_value().unwrap().clone();
        g.forward(&[("x", &x)]).unwrap();
        let second = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(&v1, g.output_value().unwrap());
        assert_eq!(first.params["w"], second.params["w"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
                let mut g = Graph::new();
                let x = g.input("x", &[3, 4]).unwrap();
                let s = g.softmax(x).unwrap();
                let t = Tensor::new(vec![3, 4], vals).unwrap();
                g.forward(&[("x", &t)]).unwrap();
                let out = g.value(s).unwrap();
                for r in 0..3 {
                    let row = out.row(r);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
