//! Dense tensors and reverse-mode differentiation over a fixed op vocabulary.
//!
//! Every model in the crate is expressed as a [`Graph`] built from a small
//! set of primitives (matmul, broadcast add, gates, concat/slice, row
//! gathers, and the scalar losses). Graphs are rebuilt per batch, which keeps
//! variable-length rollouts simple while the op set stays closed.

mod graph;
mod tensor;

pub use graph::{Axis, Bind, Bindings, Gradients, Graph, Layers, NodeId, Prefixed};
pub(crate) use graph::{kl_row, log_sum_exp};
pub use tensor::Tensor;
#[cfg(test)]
pub(crate) use tensor::matmul;

use crate::error::Result;

/// Compares analytic gradients of the scalar built by `build` against
/// central differences at `point`.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)` over every
/// coordinate of every bound tensor.
pub fn grad_check<F>(build: F, point: &Bindings, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let out = build(&mut g)?;
    g.forward(out, point)?;
    let analytic = g.backward(1.0)?;

    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for (name, value) in point {
        let grad = analytic.get(name);
        for j in 0..value.len() {
            let orig = value.data()[j];
            probe.get_mut(name).expect("cloned").data_mut()[j] = orig + step;
            let plus = g.forward(out, &probe)?.item();
            probe.get_mut(name).expect("cloned").data_mut()[j] = orig - step;
            let minus = g.forward(out, &probe)?.item();
            probe.get_mut(name).expect("cloned").data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.map_or(0.0, |t| t.data()[j]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let a = g.leaf("a");
        let y = g.matmul(x, a);
        let b = bind(&[("a", Tensor::identity(2)), ("x", Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(g.forward(y, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.sigmoid(x);
        let out = g.forward(y, &bind(&[("x", Tensor::vector(vec![0.0, 0.0]))])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn squared_l2_by_hand() {
        let mut g = Graph::new();
        let a = g.leaf("a");
        let b = g.leaf("b");
        let d = g.squared_l2(a, b, None);
        let bs = bind(&[("a", Tensor::vector(vec![1.0, 2.0])), ("b", Tensor::vector(vec![0.0, 0.0]))]);
        assert_eq!(g.forward(d, &bs).unwrap().item(), 5.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.mul(x, x);
        let s = g.reduce_mean(y);
        g.forward(s, &bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = g.backward(1.0).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let c = g.constant(Tensor::scalar(2.5));
        let zero = g.scale(x, 0.0);
        let y = g.add(c, zero);
        g.forward(y, &bind(&[("x", Tensor::scalar(1.0))])).unwrap();
        assert_eq!(g.backward(1.0).unwrap()["x"].item(), 0.0);

        // a leaf that does not feed the output still reports a zero gradient
        let mut g = Graph::new();
        let _unused = g.leaf("x");
        let c = g.constant(Tensor::scalar(1.0));
        g.forward(c, &bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert_eq!(g.backward(1.0).unwrap()["x"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn least_squares_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = bind(&[
            ("w", random(&mut rng, 3, 2)),
            ("x", random(&mut rng, 1, 3)),
            ("y", random(&mut rng, 1, 2)),
        ]);
        let err = grad_check(
            |g| {
                let (w, x, y) = (g.leaf("w"), g.leaf("x"), g.leaf("y"));
                let wx = g.matmul(x, w);
                Ok(g.squared_l2(wx, y, None))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_of_zero_function_is_zero() {
        let point = bind(&[("x", Tensor::vector(vec![1.0, -2.0]))]);
        let err = grad_check(
            |g| {
                let x = g.leaf("x");
                let z = g.scale(x, 0.0);
                Ok(g.reduce_mean(z))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_form_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = bind(&[("a", random(&mut rng, 4, 4)), ("x", random(&mut rng, 1, 4))]);
        let err = grad_check(
            |g| {
                let (a, x) = (g.leaf("a"), g.leaf("x"));
                let ax = g.matmul(x, a);
                let xax = g.mul(ax, x);
                Ok(g.reduce_mean(xax))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every primitive, ten random points each.
    #[test]
    fn every_primitive_passes_grad_check() {
        type Builder = fn(&mut Graph) -> Result<NodeId>;
        let builders: Vec<(&str, Builder)> = vec![
            ("matmul", |g| {
                let (a, b) = (g.leaf("a"), g.leaf("b"));
                let m = g.matmul(a, b);
                Ok(g.reduce_mean(m))
            }),
            ("add_broadcast", |g| {
                let (a, r) = (g.leaf("a"), g.leaf("r"));
                let s = g.add(a, r);
                let s2 = g.mul(s, s);
                Ok(g.reduce_mean(s2))
            }),
            ("sub_mul", |g| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                let d = g.sub(a, c);
                let p = g.mul(d, a);
                Ok(g.reduce_mean(p))
            }),
            ("affine", |g| {
                let a = g.leaf("a");
                let y = g.affine(a, -1.5, 0.3);
                let y2 = g.mul(y, y);
                Ok(g.reduce_mean(y2))
            }),
            ("sigmoid", |g| {
                let a = g.leaf("a");
                let y = g.sigmoid(a);
                let y2 = g.mul(y, a);
                Ok(g.reduce_mean(y2))
            }),
            ("tanh", |g| {
                let a = g.leaf("a");
                let y = g.tanh(a);
                let y2 = g.mul(y, a);
                Ok(g.reduce_mean(y2))
            }),
            ("relu", |g| {
                let a = g.leaf("a");
                let y = g.relu(a);
                let y2 = g.mul(y, a);
                Ok(g.reduce_mean(y2))
            }),
            ("concat_slice", |g| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                let cat = g.concat(&[a, c], Axis::Cols);
                let s = g.slice_cols(cat, 1, 4);
                let s2 = g.mul(s, s);
                let rows = g.concat(&[a, c], Axis::Rows);
                let r2 = g.mul(rows, rows);
                let m1 = g.reduce_mean(s2);
                let m2 = g.reduce_mean(r2);
                Ok(g.sum(&[m1, m2]))
            }),
            ("gather_repeat", |g| {
                let (t, r) = (g.leaf("b"), g.leaf("r"));
                let rows = g.gather_rows(t, vec![2, 0, 2]);
                let rep = g.repeat_rows(r, 3);
                let cat = g.concat(&[rows, rep], Axis::Cols);
                let sq = g.mul(cat, cat);
                Ok(g.reduce_mean(sq))
            }),
            ("squared_l2", |g| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                Ok(g.squared_l2(a, c, Some(vec![0.5, 2.0])))
            }),
            ("l1", |g| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                Ok(g.l1(a, c, Some(vec![0.5, 2.0])))
            }),
            ("softmax_xent", |g| {
                let a = g.leaf("a");
                Ok(g.softmax_xent(a, vec![2, 0], Some(vec![1.0, 0.25])))
            }),
            ("kl_softmax", |g| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                Ok(g.kl_softmax(a, c, Some(vec![1.0, 0.5])))
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, build) in builders {
            for _ in 0..10 {
                let point = bind(&[
                    ("a", random(&mut rng, 2, 3)),
                    ("b", random(&mut rng, 3, 3)),
                    ("c", random(&mut rng, 2, 3)),
                    ("r", random(&mut rng, 1, 3)),
                ]);
                let err = grad_check(build, &point, 1e-5).unwrap();
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn backward_visits_each_node_once_in_reverse() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let a = g.tanh(x);
        let b = g.mul(a, x);
        let c = g.add(b, a);
        let m = g.reduce_mean(c);
        g.forward(m, &bind(&[("x", Tensor::vector(vec![0.3, -0.2]))])).unwrap();
        g.backward(1.0).unwrap();
        assert_eq!(g.last_backward_order(), &[4, 3, 2, 1, 0]);
    }

    #[test]
    fn gradient_shapes_match_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let (w, x) = (g.leaf("w"), g.leaf("x"));
        let y = g.matmul(x, w);
        let m = g.reduce_mean(y);
        let point = bind(&[("w", random(&mut rng, 3, 5)), ("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        g.forward(m, &point).unwrap();
        let grads = g.backward(1.0).unwrap();
        assert_eq!(grads["w"].shape(), &[3, 5]);
        assert_eq!(grads["x"].shape(), &[3]);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let (a, b) = (g.leaf("a"), g.leaf("b"));
        let m = g.matmul(a, b);
        let bs = bind(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 2]))]);
        match g.forward(m, &bs) {
            Err(Error::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, m.index());
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            g.forward(m, &bind(&[("a", Tensor::zeros(&[2, 3]))])),
            Err(Error::UnboundLeaf(name)) if name == "b"
        ));

        let mut g = Graph::new();
        let a = g.leaf("a");
        assert!(matches!(g.backward(1.0), Err(Error::BackwardBeforeForward)));
        g.forward(a, &bind(&[("a", Tensor::zeros(&[2, 2]))])).unwrap();
        assert!(matches!(g.backward(1.0), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point = bind(&[("a", random(&mut rng, 4, 4)), ("c", random(&mut rng, 4, 4))]);
        let build = |g: &mut Graph| {
            let (a, c) = (g.leaf("a"), g.leaf("c"));
            let m = g.matmul(a, c);
            let t = g.tanh(m);
            g.reduce_mean(t)
        };
        let mut g1 = Graph::new();
        let o1 = build(&mut g1);
        let mut g2 = Graph::new();
        let o2 = build(&mut g2);
        let v1 = g1.forward(o1, &point).unwrap().item();
        let v2 = g2.forward(o2, &point).unwrap().item();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn backward_is_linear_over_summed_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let point = bind(&[("a", random(&mut rng, 2, 3)), ("c", random(&mut rng, 2, 3))]);
            let f = |g: &mut Graph| {
                let (a, c) = (g.leaf("a"), g.leaf("c"));
                let t = g.tanh(a);
                g.squared_l2(t, c, None)
            };
            let h = |g: &mut Graph| {
                let a = g.leaf("a");
                let s = g.sigmoid(a);
                g.softmax_xent(s, vec![0, 2], None)
            };
            let grads_of = |which: u8| {
                let mut g = Graph::new();
                let out = match which {
                    0 => f(&mut g),
                    1 => h(&mut g),
                    _ => {
                        let x = f(&mut g);
                        let y = h(&mut g);
                        g.sum(&[x, y])
                    }
                };
                g.forward(out, &point).unwrap();
                g.backward(1.0).unwrap()
            };
            let (gf, gh, gs) = (grads_of(0), grads_of(1), grads_of(2));
            for (k, v) in &gs {
                for (j, &s) in v.data().iter().enumerate() {
                    let part = |m: &Gradients| m.get(k).map_or(0.0, |t| t.data()[j]);
                    let expect = part(&gf) + part(&gh);
                    assert!((s - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kl_and_xent_values() {
        let mut g = Graph::new();
        let (p, q) = (g.leaf("p"), g.leaf("q"));
        let kl = g.kl_softmax(p, q, None);
        let bs = bind(&[
            ("p", Tensor::vector(vec![3f64.ln(), 0.0])),
            ("q", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let v = g.forward(kl, &bs).unwrap().item();
        let expect = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((v - expect).abs() < 1e-12);

        let mut g = Graph::new();
        let l = g.leaf("l");
        let x = g.softmax_xent(l, vec![0], None);
        let v = g.forward(x, &bind(&[("l", Tensor::vector(vec![1.0, 0.0]))])).unwrap().item();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let l = g.leaf("l");
        let x = g.softmax_xent(l, vec![5], None);
        assert!(matches!(
            g.forward(x, &bind(&[("l", Tensor::vector(vec![1.0, 0.0]))])),
            Err(Error::LabelOutOfRange { label: 5, classes: 2 })
        ));
    }
}
