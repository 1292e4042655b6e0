//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations as they execute. [`Tape::backward`]
//! then sweeps the record in reverse and returns gradients for a chosen subset
//! of leaves. Frozen leaves still pass gradients through to their consumers;
//! they simply never get a gradient of their own.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{BackwardFault, NodeId, Primitive, Tape};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Independent scalar layer-norm with unit gain and zero bias.
    fn layer_norm_reference(x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        let reference = layer_norm_reference(&[1.0, 2.0, 3.0], 1e-5);
        assert!((reference[0] + 1.2247).abs() < 1e-4);
        assert!(reference[1].abs() < 1e-12);
        assert!((reference[2] - 1.2247).abs() < 1e-4);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&reference) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_epsilon() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 2]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0; 2]).unwrap());
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        // broadcasting is limited to a bias row
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss, &[x]).unwrap();
        assert_eq!(g[&x].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[2], &[0.0, 0.0]));
        let loss = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(loss, &[z]).unwrap();
        assert_eq!(g[&z].data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_non_leaf() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y, &[x]).is_err());
        let s = tape.sum(y).unwrap();
        assert!(tape.backward(s, &[y]).is_err());
    }

    #[test]
    fn unreachable_wanted_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &[x, unused]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[&unused].data(), &[0.0; 3]);
    }

    #[test]
    fn zero_vector_normalisation_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.l2_normalize(x), Err(Error::Invalid(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![1e30, 1e30]).unwrap());
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_constant_function() {
        let leaf = t(&[3], &[0.3, -1.0, 2.0]);
        let r = grad_check(
            |tape, _ids| Ok(tape.constant(Tensor::scalar(4.0).unwrap())),
            &[leaf],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn grad_check_matmul_chain() {
        let a = t(&[2, 3], &[0.1, -0.4, 0.7, 1.1, 0.2, -0.9]);
        let b = t(&[3, 4], &[0.5, -0.3, 0.8, 0.1, -0.6, 0.9, 0.2, -0.2, 0.4, 0.3, -0.7, 0.6]);
        let c = t(&[4, 2], &[0.2, -0.5, 0.3, 0.9, -0.8, 0.1, 0.6, -0.4]);
        let r = grad_check(
            |tape, ids| {
                let ab = tape.matmul(ids[0], ids[1])?;
                let abc = tape.matmul(ab, ids[2])?;
                let sq = tape.mul(abc, abc)?;
                tape.sum(sq)
            },
            &[a, b, c],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn grad_check_cosine_head_on_eight_dims() {
        let x: Vec<f64> = (0..8).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
        let anchors: Vec<f64> = (0..24).map(|i| ((i as f64) * 1.3 - 0.5).cos()).collect();
        let r = grad_check(
            |tape, ids| {
                let a = tape.constant(Tensor::new(vec![3, 8], anchors.clone())?);
                let xr = tape.reshape(ids[0], vec![1, 8])?;
                let xn = tape.l2_normalize(xr)?;
                let an = tape.l2_normalize(a)?;
                let cos = tape.matmul_t(xn, an)?;
                let logits = tape.scale(cos, 10.0)?;
                let logits = tape.reshape(logits, vec![3])?;
                tape.cross_entropy(logits, 1)
            },
            &[t(&[8], &x)],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn grad_check_flags_corrupted_backward_rule() {
        let x = t(&[4], &[0.3, -0.8, 1.2, 0.5]);
        let build = |fault: bool| {
            move |tape: &mut Tape<f64>, ids: &[NodeId]| {
                if fault {
                    tape.inject_fault(BackwardFault::GeluDerivative);
                }
                let y = tape.gelu(ids[0])?;
                tape.sum(y)
            }
        };
        assert!(grad_check(build(false), &[x.clone()], 1e-3, 1e-3).unwrap().pass);
        assert!(!grad_check(build(true), &[x], 1e-3, 1e-3).unwrap().pass);
    }
}
