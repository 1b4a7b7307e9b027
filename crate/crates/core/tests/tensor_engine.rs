mod common;

use common::{brute_conv, gradcheck, probe_loss, rng};
use proptest::prelude::*;
use rand::Rng;
use repq::kernels::Padding;
use repq::{conv2d, conv_as_matmul_sum, flatten_bhd, Graph, Tensor};

#[test]
fn identity_1x1_kernel_is_identity() {
    let x = Tensor::<f64>::randn(vec![1, 4, 4, 2], 1.0, &mut rng(1));
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = conv2d(&x, &w, Padding::Valid).unwrap();
    assert_eq!(y, x);
}

#[test]
fn ones_kernel_over_counting_grid() {
    let x = Tensor::<f64>::from_fn(vec![1, 3, 3, 1], |i| (i + 1) as f64);
    let w = Tensor::full(vec![2, 2, 1, 1], 1.0);
    let y = conv2d(&x, &w, Padding::Valid).unwrap();
    // window sums: 1+2+4+5, 2+3+5+6, 4+5+7+8, 5+6+8+9
    let oracle = brute_conv(&x, &w, false);
    assert_eq!(oracle.data(), &[12.0, 16.0, 24.0, 28.0]);
    assert_eq!(y.shape(), &[1, 2, 2, 1]);
    assert_eq!(y.data(), oracle.data());
}

#[test]
fn conv_matches_brute_force_both_paddings() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (b, h, d, cin, cout) = (r.random_range(1..3), r.random_range(3..6), r.random_range(3..6), r.random_range(1..4), r.random_range(1..4));
        let kh = [1, 3][r.random_range(0..2)];
        let kw = [1, 3][r.random_range(0..2)];
        let x = Tensor::<f64>::randn(vec![b, h, d, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![kh, kw, cin, cout], 1.0, &mut r);
        for (pad, same) in [(Padding::Valid, false), (Padding::Same, true)] {
            let y = conv2d(&x, &w, pad).unwrap();
            assert!(y.max_abs_diff(&brute_conv(&x, &w, same)).unwrap() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::<f64>::zeros(vec![1, 4, 4, 2]);
    let w = Tensor::<f64>::zeros(vec![3, 3, 3, 1]);
    assert!(matches!(conv2d(&x, &w, Padding::Valid), Err(repq::Error::Shape { .. })));
    let w = Tensor::<f64>::zeros(vec![5, 5, 2, 1]);
    assert!(conv2d(&x, &w, Padding::Valid).is_err());
    let mut bad = Tensor::<f64>::zeros(vec![1, 4, 4, 2]);
    bad.data_mut()[3] = f64::NAN;
    let w = Tensor::<f64>::zeros(vec![1, 1, 2, 1]);
    assert!(matches!(conv2d(&bad, &w, Padding::Valid), Err(repq::Error::NonFinite { .. })));
    let mut g = Graph::<f64>::new();
    assert!(g.constant(bad).is_err());
}

#[test]
fn matmul_sum_agrees_on_fifty_instances() {
    let mut r = rng(3);
    for _ in 0..50 {
        let (b, cin, cout) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
        let (h, d) = (r.random_range(kh..=4.max(kh)), r.random_range(kw..=4.max(kw)));
        let x = Tensor::<f64>::randn(vec![b, h, d, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![kh, kw, cin, cout], 1.0, &mut r);
        let direct = conv2d(&x, &w, Padding::Valid).unwrap();
        let sliced = conv_as_matmul_sum(&x, &w, Padding::Valid).unwrap();
        assert!(direct.max_abs_diff(&sliced).unwrap() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn conv_equals_sliced_matmul(seed in any::<u64>(), b in 1usize..4, cin in 1usize..5, cout in 1usize..5,
                                 kh in 1usize..4, kw in 1usize..4, eh in 0usize..3, ew in 0usize..3) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(vec![b, kh + eh, kw + ew, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![kh, kw, cin, cout], 1.0, &mut r);
        let direct = conv2d(&x, &w, Padding::Valid).unwrap();
        let sliced = conv_as_matmul_sum(&x, &w, Padding::Valid).unwrap();
        prop_assert!(direct.max_abs_diff(&sliced).unwrap() <= 1e-12);
    }

    #[test]
    fn flatten_preserves_channel_mean(seed in any::<u64>(), b in 1usize..4, h in 1usize..5, d in 1usize..5, c in 1usize..4) {
        let x = Tensor::<f64>::randn(vec![b, h, d, c], 2.0, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let fv = g.constant(flatten_bhd(&x).unwrap()).unwrap();
        let m1 = g.mean_bhd(xv).unwrap();
        let m2 = g.mean_bhd(fv).unwrap();
        prop_assert_eq!(g.value(m1).data(), g.value(m2).data());
    }
}

#[test]
fn flatten_mean_matches_direct_average() {
    let x = Tensor::<f64>::randn(vec![2, 3, 4, 3], 1.0, &mut rng(4));
    let f = flatten_bhd(&x).unwrap();
    for c in 0..3 {
        let direct: f64 = (0..2)
            .flat_map(|b| (0..3).flat_map(move |h| (0..4).map(move |d| (b, h, d))))
            .map(|(b, h, d)| x.at(&[b, h, d, c]))
            .sum::<f64>()
            / 24.0;
        let flat: f64 = (0..24).map(|r| f.at(&[r, c])).sum::<f64>() / 24.0;
        assert!((direct - flat).abs() < 1e-14);
    }
}

#[test]
fn reduction_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![2.0, 4.0]).unwrap()).unwrap();
    let m = g.mean_bhd(x).unwrap();
    let v = g.var_bhd(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0]);
    assert_eq!(g.value(v).data(), &[1.0]);
    let c = g.constant(Tensor::full(vec![2, 3, 3, 4], 1.7)).unwrap();
    let vc = g.var_bhd(c).unwrap();
    assert!(g.value(vc).data().iter().all(|&v| v.abs() < 1e-15));
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
    assert!(g.add(a, b).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::randn(vec![2, 3, 4], 1.0, &mut rng(5))).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    assert_eq!(g.tensor_with_grad(x).grad.unwrap().len(), 24);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(vec![2])).unwrap();
    assert!(matches!(g.backward(x), Err(repq::Error::Invalid(_))));
}

#[test]
fn conv_weight_gradient_is_window_sum() {
    // d/dW[i,j,c,o] sum(conv(x, W)) = sum over output positions of x at tap (i, j).
    let x = Tensor::<f64>::randn(vec![2, 4, 5, 2], 1.0, &mut rng(6));
    let w = Tensor::<f64>::randn(vec![2, 3, 2, 3], 1.0, &mut rng(7));
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.param(w).unwrap();
    let y = g.conv2d(xv, wv, Padding::Valid).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let gw = g.grad(wv).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            for c in 0..2 {
                let mut window = 0.0;
                for b in 0..2 {
                    for r in 0..3 {
                        for q in 0..3 {
                            window += x.at(&[b, r + i, q + j, c]);
                        }
                    }
                }
                for o in 0..3 {
                    assert!((gw[((i * 3 + j) * 2 + c) * 3 + o] - window).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = Tensor::<f64>::randn(vec![2, 5, 4, 3], 1.0, &mut rng(8));
    let w = Tensor::<f64>::randn(vec![3, 3, 3, 2], 1.0, &mut rng(9));
    for pad in [Padding::Valid, Padding::Same] {
        let err = gradcheck(
            &[x.clone(), w.clone()],
            1e-5,
            |g, v| {
                let y = g.conv2d(v[0], v[1], pad)?;
                probe_loss(g, y, 10)
            },
            |_, _| false,
        );
        assert!(err <= 1e-6, "{pad:?}: {err}");
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    let a = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 3], 0.5, 2.0, &mut rng(11));
    let b = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 3], 0.5, 2.0, &mut rng(12));
    let v = Tensor::<f64>::rand_uniform(vec![3], 0.5, 2.0, &mut rng(13));
    let err = gradcheck(
        &[a, b, v],
        1e-5,
        |g, p| {
            let s = g.add(p[0], p[1])?;
            let m = g.mul(s, p[0])?;
            let d = g.div(m, p[1])?;
            let q = g.square(d)?;
            let r = g.sqrt(q)?;
            let r = g.sub(r, p[1])?;
            let c = g.mul_channel(r, p[2])?;
            let c = g.add_channel(c, p[2])?;
            let c = g.scale(c, 0.7)?;
            let c = g.add_scalar(c, 0.3)?;
            let mean = g.mean_bhd(c)?;
            let var = g.var_bhd(c)?;
            let var = g.add_scalar(var, 1.0)?;
            let inv = g.recip(var)?;
            let k = g.mul(mean, inv)?;
            let t = g.mul_channel(c, k)?;
            let t = g.relu(t)?;
            probe_loss(g, t, 14)
        },
        |_, _| false,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn shape_op_gradients() {
    let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng(15));
    let b = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng(16));
    let w = Tensor::<f64>::randn(vec![1, 3, 2, 2], 1.0, &mut rng(17));
    let err = gradcheck(
        &[a, b, w],
        1e-5,
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let m = g.reshape(m, &[3, 2, 3])?;
            let m = g.permute(m, &[2, 0, 1])?;
            let pk = g.pad_kernel(p[2], (3, 5))?;
            let ss = g.sum_spatial(pk)?;
            let l1 = probe_loss(g, m, 18)?;
            let l2 = probe_loss(g, ss, 19)?;
            g.add(l1, l2)
        },
        |_, _| false,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn pooling_and_cross_entropy_gradients() {
    let x = Tensor::<f64>::randn(vec![2, 4, 4, 3], 1.0, &mut rng(20));
    let w = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng(21));
    let err = gradcheck(
        &[x, w],
        1e-5,
        |g, p| {
            let pooled = g.avg_pool2(p[0])?;
            let feats = g.global_avg_pool(pooled)?;
            let logits = g.matmul(feats, p[1])?;
            g.softmax_cross_entropy(logits, &[1, 4])
        },
        |_, _| false,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::randn(vec![4, 8, 8, 6], 1.0, &mut rng(22))).unwrap();
        let w = g.param(Tensor::randn(vec![3, 3, 6, 7], 1.0, &mut rng(23))).unwrap();
        let y = g.conv2d(x, w, Padding::Same).unwrap();
        let y = g.relu(y).unwrap();
        let v = g.var_bhd(y).unwrap();
        let l = g.sum(v).unwrap();
        g.backward(l).unwrap();
        (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn multiply_counter_tracks_conv() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2, 5, 5, 3])).unwrap();
    let w = g.param(Tensor::zeros(vec![3, 3, 3, 4])).unwrap();
    let y = g.conv2d(x, w, Padding::Valid).unwrap();
    assert_eq!(g.counts().compute, 2 * 3 * 3 * 9 * 3 * 4);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    // only the weight needs a gradient
    assert_eq!(g.counts().backward, 2 * 3 * 3 * 9 * 3 * 4);
}
