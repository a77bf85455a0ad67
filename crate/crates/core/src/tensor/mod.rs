//! Minimal reverse-mode differentiation over dense channel-first grids.
//!
//! Only the operations the interpolation networks need are provided:
//! conv / transposed conv (1–3 spatial axes), affine layers, PReLU,
//! channel concatenation and a handful of elementwise maps and reductions.
//! Everything runs in `f64`.

mod conv;
mod gradcheck;
mod graph;
mod value;

pub use conv::{col2im, gemm, im2col, ConvGeom};
pub use gradcheck::{grad_check, FD_STEP, REL_FLOOR};
pub use graph::{CustomOp, Graph, Node};
pub use value::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 3, 4], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let xi = g.constant(x.clone());
        let k = g.constant(Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv(xi, k, b, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_box_filter_preserves_constant_interior() {
        let mut g = Graph::new();
        let xi = g.constant(Tensor::filled(vec![1, 6, 6], 2.5));
        let k = g.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0 / 9.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv(xi, k, b, &[1, 1], &[1, 1]).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 6, 6]);
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((v.data()[yy * 6 + xx] - 2.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_two_by_two_direct_sum() {
        let mut g = Graph::new();
        let xi = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv(xi, k, b, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 5, 7]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::new();
        let (xi, ki, bi) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv(xi, ki, bi, &[2, 1], &[1, 1]).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 3, 7]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..7 {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 7 {
                                    continue;
                                }
                                s += k.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * 5 + iy as usize) * 7 + ix as usize];
                            }
                        }
                    }
                    let got = out.data()[(o * 3 + oy) * 7 + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn deconv_unit_kernel_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let xi = g.constant(x.clone());
        let k = g.constant(Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.deconv(xi, k, b, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn deconv_stride_two_doubles_extent() {
        let mut g = Graph::new();
        let xi = g.constant(Tensor::filled(vec![1, 4, 4], 1.0));
        let k = g.constant(Tensor::filled(vec![1, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.deconv(xi, k, b, &[2, 2], &[0, 0]).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2)] {
            let x = rand_tensor(&mut rng, &[2, 5, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let mut g = Graph::new();
            let (xi, wi) = (g.constant(x.clone()), g.constant(w));
            let zb3 = g.constant(Tensor::zeros(vec![3]));
            let zb2 = g.constant(Tensor::zeros(vec![2]));
            let cx = g.conv(xi, wi, zb3, &[stride, stride], &[pad, pad]).unwrap();
            let y = rand_tensor(&mut rng, g.shape(cx));
            let yi = g.constant(y.clone());
            let dy = g.deconv(yi, wi, zb2, &[stride, stride], &[pad, pad]).unwrap();
            // stride 2 may lose trailing input rows; compare on the produced extent
            let dyv = g.value(dy).clone();
            let lhs = dot(g.value(cx), &y);
            let mut rhs = 0.0;
            let ds = dyv.shape().to_vec();
            for c in 0..2 {
                for r in 0..ds[1].min(5) {
                    for q in 0..ds[2].min(5) {
                        rhs += x.data()[(c * 5 + r) * 5 + q] * dyv.data()[(c * ds[1] + r) * ds[2] + q];
                    }
                }
            }
            let rel = (lhs - rhs).abs() / lhs.abs().max(1e-300);
            assert!(rel < 1e-10, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv3d_and_conv1d_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![2, 4, 4, 4], 1.0));
        let k = g.constant(Tensor::filled(vec![3, 2, 3, 3, 3], 0.1));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv(x, k, b, &[2, 2, 2], &[1, 1, 1]).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 2, 2]);
        let x1 = g.constant(Tensor::filled(vec![2, 9], 1.0));
        let k1 = g.constant(Tensor::filled(vec![4, 2, 3], 0.1));
        let b1 = g.constant(Tensor::zeros(vec![4]));
        let y1 = g.conv(x1, k1, b1, &[1], &[1]).unwrap();
        assert_eq!(g.shape(y1), &[4, 9]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2.0, 3.0]));
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);

        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = g.constant(Tensor::zeros(vec![2]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);

        let bad = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.linear(x, bad, zb).is_err());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut g = Graph::new();
        let xv = vec![0.3, -1.2, 2.0];
        let x = g.constant(Tensor::from_vec(xv.clone()));
        let w = g.param(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap());
        let b = g.param(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let gw = g.grad(w);
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw.data()[o * 3 + i], xv[i]);
            }
        }
        let err = grad_check(
            &[Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap()],
            |g, n| {
                let x = g.constant(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
                let b = g.constant(Tensor::from_vec(vec![0.5, -0.5]));
                let y = g.linear(x, n[0], b)?;
                let sq = g.square(y);
                Ok(g.sum(sq))
            },
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn prelu_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0, -4.0]));
        let a = g.param(Tensor::scalar(0.25));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.25]);
        assert_eq!(g.grad(a).data(), &[-4.0]);
        let fd = grad_check(&[Tensor::scalar(0.25)], |g, n| {
            let x = g.constant(Tensor::scalar(-4.0));
            let y = g.prelu(x, n[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(fd < 1e-8);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.param(Tensor::filled(vec![1, 4, 4], 1.0));
        let one = g.concat(&[a]).unwrap();
        assert_eq!(g.value(one), g.value(a));
        let b = g.param(Tensor::filled(vec![1, 4, 4], 2.0));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 4]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).data().iter().all(|&v| v == 1.0));
        let bad = g.param(Tensor::filled(vec![1, 4, 5], 2.0));
        let err = g.concat(&[a, bad]).unwrap_err();
        assert!(err.to_string().contains("axis 2"));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new();
        let a = g.param(Tensor::filled(vec![2], 1.0));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn second_backward_doubles_every_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&mut rng, &[2, 6, 6]));
        let k = g.param(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let b = g.param(rand_tensor(&mut rng, &[3]));
        let y = g.conv(x, k, b, &[1, 1], &[1, 1]).unwrap();
        let a = g.param(Tensor::scalar(0.1));
        let z = g.prelu(y, a).unwrap();
        let zz = g.mul(z, z).unwrap();
        let s = g.mean(zz);
        g.backward(s).unwrap();
        let first: Vec<Tensor> = (0..g.len()).map(|i| g.grad(Node(i))).collect();
        g.backward(s).unwrap();
        for (i, f) in first.iter().enumerate() {
            let second = g.grad(Node(i));
            for (p, q) in f.data().iter().zip(second.data()) {
                assert_eq!(2.0 * p, *q);
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[2, 6, 6]);
            let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let dk = rand_tensor(&mut rng, &[3, 2, 4, 4]);
            let db = rand_tensor(&mut rng, &[2]);
            let a = rand_tensor(&mut rng, &[3]);
            let err = grad_check(&[x, k, b, dk, db, a], |g, n| {
                let c = g.conv(n[0], n[1], n[2], &[2, 2], &[1, 1])?;
                let p = g.prelu(c, n[5])?;
                let d = g.deconv(p, n[3], n[4], &[2, 2], &[1, 1])?;
                let cat = g.concat(&[d, n[0]])?;
                let s = g.sigmoid(cat);
                let ch = g.charbonnier(s, 1e-3);
                let nrm = g.channel_norm(cat);
                let e = g.exp(nrm);
                let m1 = g.mean(ch);
                let m2 = g.mean(e);
                let q = g.square(cat);
                let m3 = g.sum(q);
                let t = g.add(m1, m2)?;
                let t = g.scale(t, 0.7);
                let t = g.sub(t, m3)?;
                Ok(g.offset(t, 1.0))
            })
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn conv_stride_two_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[2, 6, 6]);
            let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[2]);
            let err = grad_check(&[x, k, b], |g, n| {
                let c = g.conv(n[0], n[1], n[2], &[2, 2], &[1, 1])?;
                let s = g.square(c);
                Ok(g.sum(s))
            })
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
}
