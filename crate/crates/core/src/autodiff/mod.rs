//! Minimal reverse-mode differentiation over the op set the toy transformer
//! and the mask optimizer need.

pub mod activation;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use gradcheck::{grad_check, Feed, GradCheckReport, GraphBuilder};
pub use graph::{Bindings, Gradients, Graph, IndexId, NodeId, Op};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", &[3, 4]).unwrap();
        let i = g.input("i", &[4, 4]).unwrap();
        let y = g.matmul(x, i).unwrap();
        let xv = t(&[3, 4], (0..12).map(|v| v as f32 * 0.37 - 2.0).collect());
        let mut eye = Tensor::zeros(vec![4, 4]);
        for k in 0..4 {
            eye.data_mut()[k * 4 + k] = 1.0;
        }
        let mut b = Bindings::new();
        b.tensor("x", &xv).tensor("i", &eye);
        g.forward(&b).unwrap();
        assert_eq!(g.value(y).unwrap(), xv);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", &[2, 5]).unwrap();
        let y = g.softmax(x, false).unwrap();
        let xv = Tensor::full(vec![2, 5], 3.25f32);
        let mut b = Bindings::new();
        b.tensor("x", &xv);
        g.forward(&b).unwrap();
        for v in g.value_slice(y).unwrap() {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", &[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        let xv = Tensor::scalar(3.0f32);
        let mut b = Bindings::new();
        b.tensor("x", &xv);
        g.forward(&b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn gradient_of_constant_sum_is_zero() {
        let mut g = Graph::<f32>::new();
        let w = g.param("w", &[3]).unwrap();
        let c = g.input("c", &[4]).unwrap();
        let s = g.sum(c).unwrap();
        let wv = t(&[3], vec![1.0, 2.0, 3.0]);
        let cv = t(&[4], vec![1.0; 4]);
        let mut b = Bindings::new();
        b.tensor("w", &wv).tensor("c", &cv);
        g.forward(&b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0, 0.0]);
        let _ = w;
    }

    #[test]
    fn backward_requires_forward_and_scalar_seed() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", &[2]).unwrap();
        let y = g.square(x).unwrap();
        let s = g.sum(y).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        let xv = t(&[2], vec![1.0, 2.0]);
        let mut b = Bindings::new();
        b.tensor("x", &xv);
        g.forward(&b).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f32>::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[4, 5]).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { node, expected, actual }) => {
                assert!(node.contains("matmul"), "{node}");
                assert_eq!(expected, vec![3, 5]);
                assert_eq!(actual, vec![4, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
        // binding with the wrong shape is reported at forward time
        let mut g = Graph::<f32>::new();
        g.input("a", &[2, 3]).unwrap();
        let wrong = Tensor::<f32>::zeros(vec![3, 2]);
        let mut b = Bindings::new();
        b.tensor("a", &wrong);
        assert!(matches!(g.forward(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let mut g = Graph::<f32>::new();
        let table = g.input("table", &[4, 2]).unwrap();
        let ids = g.index_input("ids", 2, 4).unwrap();
        g.embedding(table, ids).unwrap();
        let tv = Tensor::<f32>::zeros(vec![4, 2]);
        let bad = [1usize, 4];
        let mut b = Bindings::new();
        b.tensor("table", &tv).indices("ids", &bad);
        assert!(matches!(
            g.forward(&b),
            Err(Error::TokenOutOfRange { id: 4, position: 1, .. })
        ));
    }

    struct Mlp {
        dims: [usize; 4],
        batch: usize,
    }

    impl GraphBuilder for Mlp {
        fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
            let mut h = g.input("x", &[self.batch, self.dims[0]])?;
            for l in 0..3 {
                let w = g.param(format!("w{l}"), &[self.dims[l + 1], self.dims[l]])?;
                let b = g.param(format!("b{l}"), &[self.dims[l + 1]])?;
                let z = g.matmul_nt(h, w)?;
                let z = g.add_row(z, b)?;
                h = if l < 2 { g.gelu(z)? } else { z };
            }
            let sq = g.square(h)?;
            g.sum(sq)
        }
    }

    fn rand_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp_feed(seed: u64, m: &Mlp) -> Feed {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut feed = Feed::new().real("x", rand_tensor(&mut rng, &[m.batch, m.dims[0]]));
        for l in 0..3 {
            feed = feed
                .real(&format!("w{l}"), rand_tensor(&mut rng, &[m.dims[l + 1], m.dims[l]]))
                .real(&format!("b{l}"), rand_tensor(&mut rng, &[m.dims[l + 1]]));
        }
        feed
    }

    #[test]
    fn mlp_forward_matches_straight_line_oracle() {
        let m = Mlp {
            dims: [5, 7, 6, 3],
            batch: 4,
        };
        let feed = mlp_feed(11, &m);
        // straight-line reimplementation in f64
        let x = &feed.reals["x"];
        let mut h: Vec<Vec<f64>> = (0..m.batch).map(|r| x.row(r).to_vec()).collect();
        for l in 0..3 {
            let w = &feed.reals[&format!("w{l}")];
            let b = &feed.reals[&format!("b{l}")];
            h = h
                .iter()
                .map(|row| {
                    (0..m.dims[l + 1])
                        .map(|o| {
                            let z: f64 = row.iter().zip(w.row(o)).map(|(a, c)| a * c).sum::<f64>() + b.data()[o];
                            if l < 2 {
                                0.5 * z * (1.0 + (0.7978845608028654 * (z + 0.044715 * z * z * z)).tanh())
                            } else {
                                z
                            }
                        })
                        .collect()
                })
                .collect();
        }
        let oracle: f64 = h.iter().flatten().map(|v| v * v).sum();
        let (value, _) = gradcheck::analytic_gradients(&m, &feed).unwrap();
        assert!((value as f64 - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "{value} vs {oracle}");
    }

    #[test]
    fn mlp_gradients_pass_finite_differences() {
        let m = Mlp {
            dims: [4, 6, 5, 3],
            batch: 3,
        };
        let report = grad_check(&m, &mlp_feed(5, &m), 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    struct LinearSquaredLoss;

    impl GraphBuilder for LinearSquaredLoss {
        fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
            let x = g.input("x", &[6, 3])?;
            let w = g.param("w", &[2, 3])?;
            let y = g.input("y", &[6, 2])?;
            let p = g.matmul_nt(x, w)?;
            let ny = g.scale(y, -1.0)?;
            let d = g.add(p, ny)?;
            let sq = g.square(d)?;
            g.sum(sq)
        }
    }

    fn linear_feed() -> Feed {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        Feed::new()
            .real("x", rand_tensor(&mut rng, &[6, 3]))
            .real("w", rand_tensor(&mut rng, &[2, 3]))
            .real("y", rand_tensor(&mut rng, &[6, 2]))
    }

    #[test]
    fn grad_check_passes_linear_layer() {
        let report = grad_check(&LinearSquaredLoss, &linear_feed(), 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let feed = linear_feed();
        let (_, mut analytic) = gradcheck::analytic_gradients(&LinearSquaredLoss, &feed).unwrap();
        for v in analytic.get_mut("w").unwrap().data_mut() {
            *v *= 2.0;
        }
        let numeric = gradcheck::numeric_gradients(&LinearSquaredLoss, &feed, &["w".to_string()]).unwrap();
        let report = gradcheck::compare(&analytic, &numeric, 1e-3).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error() > 0.4);
    }

    struct GeluNode;

    impl GraphBuilder for GeluNode {
        fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
            let x = g.param("x", &[16])?;
            let y = g.gelu(x)?;
            let c = g.input("c", &[16])?;
            let y = g.mul(y, c)?;
            g.sum(y)
        }
    }

    #[test]
    fn grad_check_passes_gelu() {
        let x = Tensor::new(vec![16], (0..16).map(|i| i as f64 * 0.4 - 3.0).collect()).unwrap();
        let c = Tensor::new(vec![16], (0..16).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
        let report = grad_check(&GeluNode, &Feed::new().real("x", x).real("c", c), 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = Mlp {
            dims: [4, 8, 8, 2],
            batch: 5,
        };
        let feed = mlp_feed(77, &m);
        let (a, ga) = gradcheck::analytic_gradients(&m, &feed).unwrap();
        let (b, gb) = gradcheck::analytic_gradients(&m, &feed).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
