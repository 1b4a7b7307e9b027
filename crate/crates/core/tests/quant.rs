mod common;

use common::{brute_conv, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use repq::graph::QuantParams;
use repq::kernels::Padding;
use repq::quant::{fake_quantize, min_error_step, product_bits, step_grid, Granularity, QuantRange, Quantizer, GRID_SIZE};
use repq::{Error, Graph, ParamStore, Tensor};

/// Reference quantizer written directly from the definition.
fn q_ref(v: f64, s: f64, qmin: f64, qmax: f64) -> f64 {
    (v / s).round_ties_even().clamp(qmin, qmax) * s
}

fn ranges() -> impl Strategy<Value = QuantRange> {
    (prop_oneof![Just(2u32), Just(3), Just(4), Just(8)], any::<bool>()).prop_map(|(b, s)| QuantRange::new(b, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn idempotent_and_on_lattice(v in -50.0f64..50.0, s in 0.01f64..4.0, range in ranges()) {
        let q = fake_quantize(v, s, range);
        prop_assert_eq!(q, q_ref(v, s, range.qmin(), range.qmax()));
        prop_assert_eq!(fake_quantize(q, s, range), q);
        let k = q / s;
        prop_assert!((k - k.round()).abs() < 1e-9);
        prop_assert!(k >= range.qmin() - 1e-9 && k <= range.qmax() + 1e-9);
    }

    #[test]
    fn monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, s in 0.01f64..4.0, range in ranges()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fake_quantize(lo, s, range) <= fake_quantize(hi, s, range));
    }

    #[test]
    fn saturated_inputs_have_zero_gradient(vals in prop::collection::vec(-30.0f64..30.0, 1..40), s in 0.05f64..2.0, range in ranges()) {
        let n = vals.len();
        let mut g = Graph::new();
        let v = g.param(Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
        let sv = g.constant(Tensor::new(vec![1], vec![s]).unwrap()).unwrap();
        let q = g.quantize(v, sv, range.params(n)).unwrap();
        let l = g.sum(q).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap();
        for (i, &x) in vals.iter().enumerate() {
            let r = x / s;
            if r < range.qmin() || r > range.qmax() {
                prop_assert_eq!(grad[i], 0.0);
            } else {
                prop_assert_eq!(grad[i], 1.0);
            }
        }
    }
}

#[test]
fn properties_on_1e5_samples() {
    let mut r = rng(1);
    let configs: Vec<QuantRange> = [2, 3, 4, 8].iter().flat_map(|&b| [true, false].map(|s| QuantRange::new(b, s).unwrap())).collect();
    for i in 0..100_000 {
        let range = configs[i % configs.len()];
        let s: f64 = r.random_range(0.01..3.0);
        let (a, b): (f64, f64) = (r.random_range(-40.0..40.0), r.random_range(-40.0..40.0));
        let q = fake_quantize(a, s, range);
        assert_eq!(fake_quantize(q, s, range), q);
        let k = q / s;
        assert!((k - k.round()).abs() < 1e-9 && k >= range.qmin() - 1e-9 && k <= range.qmax() + 1e-9);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        assert!(fake_quantize(lo, s, range) <= fake_quantize(hi, s, range));
    }
}

#[test]
fn scalar_examples() {
    let u2 = QuantRange::new(2, false).unwrap();
    assert_eq!(fake_quantize(0.0, 0.37, u2), 0.0);
    assert_eq!(fake_quantize(0.0, 0.37, QuantRange::new(4, true).unwrap()), 0.0);
    assert_eq!(fake_quantize(2.6, 1.0, u2), 3.0);
    assert_eq!(fake_quantize(7.0, 1.0, u2), 3.0);
    assert_eq!(fake_quantize(2.5, 1.0, u2), 2.0);
    let mut g = Graph::new();
    let v = g.param(Tensor::new(vec![2], vec![7.0, 2.6]).unwrap()).unwrap();
    let s = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let q = g.quantize(v, s, u2.params(2)).unwrap();
    let l = g.sum(q).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0]);
}

#[test]
fn invalid_steps_and_ranges() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let z = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let p = QuantRange::new(4, true).unwrap().params(2);
    assert!(matches!(g.quantize(v, z, p), Err(Error::Invalid(_))));
    let wrong = g.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
    assert!(g.quantize(v, wrong, p).is_err());
    assert!(QuantRange::new(1, true).is_err());
    assert!(QuantRange::new(0, false).is_err());

    let mut store = ParamStore::<f64>::new();
    let quant = Quantizer::register(&mut store, "q", QuantRange::new(4, true).unwrap(), Granularity::PerChannel, 2);
    let binds = store.bind(&mut g).unwrap();
    assert!(matches!(quant.apply(&mut g, &binds, v), Err(Error::Uninitialized(_))));
}

/// Regime of one element at the base point `(v0, s0)`.
#[derive(Clone, Copy)]
enum Regime {
    /// Inside the clamp range, with `c = round(v0/s0) - v0/s0` frozen.
    Inside(f64),
    Low,
    High,
}

fn regime(v0: f64, s0: f64, qmin: f64, qmax: f64) -> Regime {
    let t = v0 / s0;
    if t < qmin {
        Regime::Low
    } else if t > qmax {
        Regime::High
    } else {
        Regime::Inside(t.round_ties_even() - t)
    }
}

/// Smooth function equal to Q at the base point whose exact derivatives are
/// the straight-through input gradient and the LSQ step gradient.
fn surrogate(v: f64, s: f64, r: Regime, qmin: f64, qmax: f64) -> f64 {
    match r {
        Regime::Inside(c) => v + s * c,
        Regime::Low => s * qmin,
        Regime::High => s * qmax,
    }
}

#[test]
fn quantize_gradients_match_surrogate_differences() {
    let mut r = rng(2);
    let range = QuantRange::new(3, true).unwrap();
    let (qmin, qmax) = (range.qmin(), range.qmax());
    for _ in 0..20 {
        let n = 24;
        let vals: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let s0: f64 = r.random_range(0.5..1.2);
        let weights: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let c: Vec<Regime> = vals.iter().map(|&v| regime(v, s0, qmin, qmax)).collect();
        let loss = |vs: &[f64], s: f64| -> f64 { (0..n).map(|i| weights[i] * surrogate(vs[i], s, c[i], qmin, qmax)).sum() };

        let mut g = Graph::new();
        let v = g.param(Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
        let sv = g.param(Tensor::new(vec![1], vec![s0]).unwrap()).unwrap();
        let params = QuantParams { qmin, qmax, grad_scale: 1.0 };
        let q = g.quantize(v, sv, params).unwrap();
        for (i, &x) in g.value(q).data().iter().enumerate() {
            assert!((x - surrogate(vals[i], s0, c[i], qmin, qmax)).abs() < 1e-12);
        }
        let w = g.constant(Tensor::new(vec![n], weights.clone()).unwrap()).unwrap();
        let prod = g.mul(q, w).unwrap();
        let l = g.sum(prod).unwrap();
        g.backward(l).unwrap();

        let h = 1e-6;
        for i in 0..n {
            let (mut p, mut m) = (vals.clone(), vals.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, s0) - loss(&m, s0)) / (2.0 * h);
            assert!((fd - g.grad(v).unwrap()[i]).abs() <= 1e-6);
        }
        let fd = (loss(&vals, s0 + h) - loss(&vals, s0 - h)) / (2.0 * h);
        assert!((fd - g.grad(sv).unwrap()[0]).abs() <= 1e-6 * fd.abs().max(1.0));
    }
}

#[test]
fn step_gradient_scale_and_saturation() {
    let range = QuantRange::new(2, false).unwrap();
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![4], vec![-1.0, 0.3, 1.6, 9.0]).unwrap()).unwrap();
    let s = g.param(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let q = g.quantize(v, s, range.params(4)).unwrap();
    let l = g.sum(q).unwrap();
    g.backward(l).unwrap();
    // below: qmin = 0; inside: round - v/s; above: qmax = 3
    let raw = 0.0 + (0.0 - 0.3) + (2.0 - 1.6) + 3.0;
    let gs = 1.0 / (4.0f64 * 3.0).sqrt();
    assert!((g.grad(s).unwrap()[0] - raw * gs).abs() < 1e-12);
}

/// conv -> BN -> per-channel quantize -> weighted sum, written out in plain
/// f64 with the frozen-rounding surrogate.
struct Oracle {
    x: Tensor<f64>,
    probe: Vec<f64>,
    c: Vec<Regime>,
    qmin: f64,
    qmax: f64,
}

impl Oracle {
    fn pre_quant(&self, w: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let y = brute_conv(&self.x, w, true);
        let co = w.shape()[3];
        let rows = (y.numel() / co) as f64;
        let mut mean = vec![0.0; co];
        let mut var = vec![0.0; co];
        for (i, &v) in y.data().iter().enumerate() {
            mean[i % co] += v / rows;
        }
        for (i, &v) in y.data().iter().enumerate() {
            var[i % co] += (v - mean[i % co]).powi(2) / rows;
        }
        y.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let o = i % co;
                gamma[o] * (v - mean[o]) / (var[o] + 1e-5).sqrt() + beta[o]
            })
            .collect()
    }

    fn loss(&self, w: &Tensor<f64>, gamma: &[f64], beta: &[f64], s: &[f64]) -> f64 {
        let co = s.len();
        self.pre_quant(w, gamma, beta)
            .iter()
            .enumerate()
            .map(|(i, &v)| self.probe[i] * surrogate(v, s[i % co], self.c[i], self.qmin, self.qmax))
            .sum()
    }
}

#[test]
fn composed_chain_matches_reference_differences() {
    let mut r = rng(3);
    let range = QuantRange::new(4, true).unwrap();
    let (cin, co) = (2, 3);
    for trial in 0..10 {
        let x = Tensor::<f64>::randn(vec![2, 4, 4, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![3, 3, cin, co], 0.5, &mut r);
        let gamma: Vec<f64> = (0..co).map(|_| r.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..co).map(|_| r.random_range(-0.5..0.5)).collect();
        let s: Vec<f64> = (0..co).map(|_| r.random_range(0.2..0.4)).collect();
        let numel = 2 * 4 * 4 * co;
        let probe: Vec<f64> = (0..numel).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut oracle = Oracle { x: x.clone(), probe, c: vec![], qmin: range.qmin(), qmax: range.qmax() };
        let pre = oracle.pre_quant(&w, &gamma, &beta);
        oracle.c = pre.iter().enumerate().map(|(i, &v)| regime(v, s[i % co], range.qmin(), range.qmax())).collect();

        let mut store = ParamStore::<f64>::new();
        let bn = repq::BnState::register(&mut store, "bn", co, 0.1, 1e-5).unwrap();
        store.set(bn.gamma, Tensor::new(vec![co], gamma.clone()).unwrap()).unwrap();
        store.set(bn.beta, Tensor::new(vec![co], beta.clone()).unwrap()).unwrap();
        let mut g = Graph::new();
        let binds = store.bind(&mut g).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let wv = g.param(w.clone()).unwrap();
        let sv = g.param(Tensor::new(vec![co], s.clone()).unwrap()).unwrap();
        let y = g.conv2d(xv, wv, Padding::Same).unwrap();
        let y = repq::batchnorm::bn_forward(&mut g, y, &bn, &binds, &mut store, repq::batchnorm::Mode::Train, false).unwrap();
        let q = g.quantize(y, sv, QuantParams { qmin: range.qmin(), qmax: range.qmax(), grad_scale: 1.0 }).unwrap();
        let pv = g.constant(Tensor::new(vec![2, 4, 4, co], oracle.probe.clone()).unwrap()).unwrap();
        let prod = g.mul(q, pv).unwrap();
        let l = g.sum(prod).unwrap();
        assert!((g.value(l).data()[0] - oracle.loss(&w, &gamma, &beta, &s)).abs() < 1e-10);
        g.backward(l).unwrap();

        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        let mut worst = 0.0f64;
        for i in 0..w.numel() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (oracle.loss(&p, &gamma, &beta, &s) - oracle.loss(&m, &gamma, &beta, &s)) / (2.0 * h);
            worst = worst.max(rel(g.grad(wv).unwrap()[i], fd));
        }
        for o in 0..co {
            let bump = |v: &[f64], d: f64| {
                let mut v = v.to_vec();
                v[o] += d;
                v
            };
            let fd = (oracle.loss(&w, &bump(&gamma, h), &beta, &s) - oracle.loss(&w, &bump(&gamma, -h), &beta, &s)) / (2.0 * h);
            worst = worst.max(rel(g.grad(binds.var(bn.gamma)).unwrap()[o], fd));
            let fd = (oracle.loss(&w, &gamma, &bump(&beta, h), &s) - oracle.loss(&w, &gamma, &bump(&beta, -h), &s)) / (2.0 * h);
            worst = worst.max(rel(g.grad(binds.var(bn.beta)).unwrap()[o], fd));
            let fd = (oracle.loss(&w, &gamma, &beta, &bump(&s, h)) - oracle.loss(&w, &gamma, &beta, &bump(&s, -h))) / (2.0 * h);
            worst = worst.max(rel(g.grad(sv).unwrap()[o], fd));
        }
        assert!(worst <= 1e-4, "trial {trial}: {worst}");
    }
}

#[test]
fn grid_shape() {
    let grid = step_grid(3.0, 7.0);
    assert_eq!(grid.len(), GRID_SIZE);
    assert_eq!(grid[102], 3.0 / 7.0);
    let ratio = 32f64.powf(1.0 / 127.0);
    for pair in grid.windows(2) {
        assert!((pair[1] / pair[0] - ratio).abs() < 1e-12);
    }
    assert!((grid[127] / grid[0] - 32.0).abs() < 1e-9);
}

#[test]
fn min_error_beats_every_candidate() {
    let mut r = rng(4);
    for trial in 0..40 {
        let range = QuantRange::new([2, 3, 4, 8][trial % 4], trial % 2 == 0).unwrap();
        let sigma: f64 = r.random_range(0.1..5.0);
        let normal = Normal::new(0.0, sigma).unwrap();
        let vals: Vec<f64> = (0..200).map(|_| normal.sample(&mut r)).collect();
        let choice = min_error_step(&vals, range);
        let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = |s: f64| -> f64 { vals.iter().map(|&v| (q_ref(v, s, range.qmin(), range.qmax()) - v).powi(2)).sum() };
        assert!((choice.error - err(choice.step)).abs() <= 1e-12 * choice.error.max(1.0));
        for cand in step_grid(max_abs, range.qmax()) {
            assert!(choice.error <= err(cand));
        }
        assert!(!choice.floored);
    }
}

#[test]
fn min_error_recovers_lattice_and_floors_zeros() {
    let range = QuantRange::new(2, false).unwrap();
    let s0 = 0.75;
    let vals: Vec<f64> = (0..40).map(|i| (i % 4) as f64 * s0).collect();
    let choice = min_error_step(&vals, range);
    assert_eq!(choice.error, 0.0);

    let mut store = ParamStore::<f64>::new();
    let mut q = Quantizer::register(&mut store, "w", QuantRange::new(4, true).unwrap(), Granularity::PerChannel, 3);
    let mut t = Tensor::<f64>::randn(vec![3, 3, 2, 3], 1.0, &mut rng(5));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 3 == 1 {
            *v = 0.0;
        }
    }
    let choices = q.init_min_error(&mut store, &t).unwrap();
    assert!(q.initialized);
    assert_eq!(q.flagged, vec![1]);
    assert_eq!(choices[1].step, 1e-8);
    assert_eq!(choices[1].error, 0.0);
    assert_eq!(store.get(q.step).data()[1], 1e-8);
    let mut g = Graph::new();
    let binds = store.bind(&mut g).unwrap();
    let v = g.constant(t.clone()).unwrap();
    let out = q.apply(&mut g, &binds, v).unwrap();
    for (i, &x) in g.value(out).data().iter().enumerate() {
        let s = store.get(q.step).data()[i % 3];
        assert_eq!(x, q_ref(t.data()[i], s, -8.0, 7.0));
    }
}

/// Minimal bit-width holding every product, by enumerating the products.
fn enumerated_bits(a: u32, b: u32, signed: bool) -> u32 {
    let range = |bits: u32| -> Vec<i64> {
        if signed {
            (-(1i64 << (bits - 1))..(1i64 << (bits - 1))).collect()
        } else {
            (0..(1i64 << bits)).collect()
        }
    };
    let (ra, rb) = (range(a), range(b));
    let (mut lo, mut hi) = (0i64, 0i64);
    for &x in &ra {
        for &y in &rb {
            lo = lo.min(x * y);
            hi = hi.max(x * y);
        }
    }
    (1..64)
        .find(|&n| if signed { -(1i64 << (n - 1)) <= lo && hi < (1i64 << (n - 1)) } else { hi < (1i64 << n) })
        .unwrap()
}

#[test]
fn product_bits_matches_enumeration() {
    assert_eq!(product_bits(2, 2, false), 4);
    assert_eq!(product_bits(1, 1, false), 1);
    assert_eq!(product_bits(8, 8, false), 16);
    for a in 1..=8 {
        for b in 1..=8 {
            assert_eq!(product_bits(a, b, false), enumerated_bits(a, b, false), "unsigned {a}x{b}");
            if a >= 2 && b >= 2 {
                assert_eq!(product_bits(a, b, true), enumerated_bits(a, b, true), "signed {a}x{b}");
            }
        }
    }
}
