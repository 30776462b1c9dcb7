//! Minimal dense numerical core with reverse-mode gradients.
//!
//! A [`Graph`] is a tape: each primitive appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! exact analytic gradients. Forward passes reject NaN/Inf outright.
//! Reductions accumulate sequentially in a fixed order so results are
//! bit-reproducible.
//!
//! ```
//! use debias_core::compute::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(&Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
//! let loss = g.squared_l2(w).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, numeric_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Lower clamp applied to probabilities before `log` or fractional powers.
pub const PROB_FLOOR: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn reversal_forward_identity_backward_scaled() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::row(&[1.5, -2.0])).unwrap();
        let r = g.reverse_grad(v, 3.2).unwrap();
        assert_eq!(g.value(r).data(), &[1.5, -2.0]);
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(v).data(), &[-3.2, -3.2]);
    }

    #[test]
    fn double_reversal_is_lambda_squared() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::row(&[0.3, 0.7, -1.0])).unwrap();
        let r1 = g.reverse_grad(v, 1.7).unwrap();
        let r2 = g.reverse_grad(r1, 1.7).unwrap();
        let s = g.sum(r2).unwrap();
        let grads = g.backward(s).unwrap();
        for &x in grads.wrt(v).data() {
            assert!((x - 1.7 * 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::row(&[2.0])).unwrap();
        let d = g.detach(v).unwrap();
        let p = g.mul(d, v).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        // d(detach(v)·v)/dv = detach(v) only
        assert_eq!(grads.wrt(v).data(), &[2.0]);

        let mut g = Graph::new();
        let v = g.param(&Tensor::row(&[2.0])).unwrap();
        let d = g.detach(v).unwrap();
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(v).data(), &[0.0]);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
        let z = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
        assert!(matches!(g.log(z), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[-1.0])).unwrap();
        assert!(matches!(g.pow(a, 0.5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn quadratic_grad_check() {
        let w = Tensor::row(&[1.0, 2.0, 3.0]);
        let err = grad_check(&[w], 1e-5, |g, v| g.squared_l2(v[0])).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let w = Tensor::row(&[1.0]);
        assert!(grad_check(&[w], 1e-2, |g, v| g.sum(v[0])).is_err());
    }

    #[test]
    fn grad_check_respects_detach_and_reversal() {
        let w = Tensor::row(&[0.4, -0.9]);
        let err = grad_check(&[w], 1e-5, |g, v| {
            let d = g.detach(v[0])?;
            let r = g.reverse_grad(v[0], 2.5)?;
            let a = g.mul(d, r)?;
            let b = g.mul(a, v[0])?;
            g.sum(b)
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_rows_positive_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Graph::new();
            let x = g
                .constant(rand_tensor(&mut rng, 4, 5, -30.0, 30.0))
                .unwrap();
            let y = g.softmax_rows(x).unwrap();
            let t = g.value(y);
            for r in 0..4 {
                let s: f64 = t.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(t.row_slice(r).iter().all(|&p| p > 0.0));
            }
        }
    }

    type Builder = fn(&mut Graph, &[Var]) -> crate::Result<Var>;

    /// Every primitive against central differences on randomized inputs.
    #[test]
    fn primitives_match_finite_differences() {
        let cases: Vec<(&str, Vec<(usize, usize, f64, f64)>, Builder)> = vec![
            (
                "affine",
                vec![(3, 4, -1.0, 1.0), (4, 2, -1.0, 1.0), (1, 2, -1.0, 1.0)],
                |g, v| {
                    let y = g.affine(v[0], v[1], v[2])?;
                    let w = g.sin_weights(y)?;
                    g.sum(w)
                },
            ),
            ("relu", vec![(3, 3, -1.0, 1.0)], |g, v| {
                let y = g.relu(v[0])?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
            ("softmax", vec![(3, 4, -2.0, 2.0)], |g, v| {
                let y = g.softmax_rows(v[0])?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
            ("sigmoid", vec![(2, 3, -3.0, 3.0)], |g, v| {
                let y = g.sigmoid(v[0])?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
            ("log", vec![(2, 3, 0.2, 3.0)], |g, v| {
                let y = g.log(v[0])?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
            ("pow", vec![(2, 3, 0.2, 3.0)], |g, v| {
                let y = g.pow(v[0], 0.7)?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
            (
                "mul-broadcast",
                vec![(3, 4, -1.0, 1.0), (1, 4, -1.0, 1.0), (3, 1, -1.0, 1.0)],
                |g, v| {
                    let a = g.mul(v[0], v[1])?;
                    let b = g.mul(a, v[2])?;
                    let w = g.sin_weights(b)?;
                    g.sum(w)
                },
            ),
            (
                "add-sub",
                vec![(3, 4, -1.0, 1.0), (1, 1, -1.0, 1.0)],
                |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(a, v[0])?;
                    let c = g.sub(v[1], a)?;
                    let d = g.mul(b, c)?;
                    let w = g.sin_weights(d)?;
                    g.sum(w)
                },
            ),
            ("reductions", vec![(3, 4, -1.0, 1.0)], |g, v| {
                let a = g.sum_rows(v[0])?;
                let b = g.sum_cols(v[0])?;
                let a2 = g.squared_l2(a)?;
                let b2 = g.mean(b)?;
                let c = g.mul(a2, b2)?;
                let d = g.squared_l2(v[0])?;
                g.add(c, d)
            }),
            (
                "structural",
                vec![(3, 2, -1.0, 1.0), (3, 3, -1.0, 1.0)],
                |g, v| {
                    let a = g.concat_cols(v[0], v[1])?;
                    let b = g.gather_rows(a, &[2, 0, 0])?;
                    let b = g.transpose(b)?;
                    let b = g.transpose(b)?;
                    let c = g.select_col(b, 3)?;
                    let d = g.scale(c, 1.3)?;
                    let e = g.offset(d, 0.2)?;
                    let f = g.mul(e, b)?;
                    let w = g.sin_weights(f)?;
                    g.sum(w)
                },
            ),
            (
                "transpose-matmul",
                vec![(3, 2, -1.0, 1.0), (3, 4, -1.0, 1.0)],
                |g, v| {
                    let t = g.transpose(v[0])?;
                    let m = g.matmul(t, v[1])?;
                    let w = g.sin_weights(m)?;
                    g.sum(w)
                },
            ),
            ("bce", vec![(4, 1, -3.0, 3.0), (4, 1, 0.0, 1.0)], |g, v| {
                let y = g.bce_with_logits(v[0], v[1])?;
                g.sum(y)
            }),
            ("clamp", vec![(2, 3, 0.1, 0.9)], |g, v| {
                let y = g.clamp(v[0], 0.0, 1.0)?;
                let w = g.sin_weights(y)?;
                g.sum(w)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, shapes, f) in cases {
            for trial in 0..100 {
                let params: Vec<Tensor> = shapes
                    .iter()
                    .map(|&(r, c, lo, hi)| rand_tensor(&mut rng, r, c, lo, hi))
                    .collect();
                let err = grad_check(&params, 1e-6, f).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: {err}");
            }
        }
    }

    impl Graph {
        /// Multiplies by a fixed non-uniform weight pattern so that checks
        /// see distinct gradients per entry.
        fn sin_weights(&mut self, v: Var) -> crate::Result<Var> {
            let (r, c) = self.shape(v);
            let w: Vec<f64> = (0..r * c).map(|k| ((k as f64) * 0.7 + 0.3).sin()).collect();
            let w = self.constant(Tensor::from_vec(r, c, w)?)?;
            self.mul(v, w)
        }
    }
}
