//! Invariant suites behind `repq verify`.
//!
//! Each check compares an implementation against an independent oracle on
//! random instances and reports the worst deviation. A [`Sabotage`] fault
//! perturbs one suite's candidate values so the comparison itself can be
//! shown to bite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repq::batchnorm::{self, bn_est_mean, bn_est_var, bn_forward, BnState, Mode, StatsMethod};
use repq::quant::{fake_quantize, min_error_step, reconstruction_error, step_grid};
use repq::reparam::{block_forward_expanded, merged_forward, BnConfig, MergeOptions, ReparamBlock, Topology};
use repq::{conv2d, conv_as_matmul_sum, flatten_bhd, product_bits, Graph, Padding, ParamStore, QuantRange, Scalar, Tensor, Var};
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sabotage {
    Conv,
    BnFold,
    Merge,
    Grad,
    BnEst,
    Edge,
    Quant,
    Bits,
}

impl Sabotage {
    pub const ALL: [Sabotage; 8] = [
        Sabotage::Conv,
        Sabotage::BnFold,
        Sabotage::Merge,
        Sabotage::Grad,
        Sabotage::BnEst,
        Sabotage::Edge,
        Sabotage::Quant,
        Sabotage::Bits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sabotage::Conv => "conv",
            Sabotage::BnFold => "bnfold",
            Sabotage::Merge => "merge",
            Sabotage::Grad => "grad",
            Sabotage::BnEst => "bnest",
            Sabotage::Edge => "edge",
            Sabotage::Quant => "quant",
            Sabotage::Bits => "bits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, instances: usize, worst: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: worst.is_finite() && worst <= tolerance,
            instances,
            worst,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failures(name: &str, instances: usize, failures: Vec<String>) -> Self {
        Check {
            name: name.into(),
            passed: failures.is_empty(),
            instances,
            worst: failures.len() as f64,
            tolerance: 0.0,
            detail: if failures.is_empty() {
                "no violations".into()
            } else {
                failures.join("; ")
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub sabotage: Option<String>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<22} n={:<6} worst={:.3e} tol={:.1e}  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.worst,
                c.tolerance,
                c.detail
            ));
        }
        out
    }
}

type CheckFn = fn(bool) -> Result<Check>;

/// Every suite with the fault that targets it.
pub const SUITES: [(&str, Sabotage, CheckFn); 11] = [
    ("conv_oracle", Sabotage::Conv, conv_oracle),
    ("flatten_mean", Sabotage::Conv, flatten_mean),
    ("bn_fold", Sabotage::BnFold, bn_fold_identity),
    ("merge_equivalence", Sabotage::Merge, merge_equivalence),
    ("merge_gradients", Sabotage::Merge, merge_gradients),
    ("gradcheck", Sabotage::Grad, gradcheck_suite),
    ("backward_determinism", Sabotage::Grad, backward_determinism),
    ("bnest_exactness", Sabotage::BnEst, bnest_exactness),
    ("edge_effect", Sabotage::Edge, edge_effect),
    ("quantizer", Sabotage::Quant, quantizer_properties),
    ("product_bits", Sabotage::Bits, product_bits_table),
];

pub fn run(sabotage: Option<Sabotage>) -> Report {
    let checks = SUITES
        .iter()
        .map(|&(name, target, f)| {
            f(sabotage == Some(target)).unwrap_or_else(|e| Check {
                name: name.into(),
                passed: false,
                instances: 0,
                worst: f64::INFINITY,
                tolerance: 0.0,
                detail: format!("error: {e}"),
            })
        })
        .collect();
    Report {
        sabotage: sabotage.map(|s| s.name().to_string()),
        checks,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Valid-padding `conv2d` against the sliced-matmul decomposition.
pub fn conv_oracle(fault: bool) -> Result<Check> {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let n = 200;
    for _ in 0..n {
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
        let (h, d) = (r.random_range(kh..=kh + 4), r.random_range(kw..=kw + 4));
        let (b, cin, cout) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        let x = Tensor::<f64>::randn(vec![b, h, d, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![kh, kw, cin, cout], 1.0, &mut r);
        let mut y = conv2d(&x, &w, Padding::Valid)?;
        if fault {
            y.data_mut()[0] += 1e-6;
        }
        let z = conv_as_matmul_sum(&x, &w, Padding::Valid)?;
        worst = worst.max(y.max_abs_diff(&z)?);
    }
    Ok(Check::bound("conv_oracle", n, worst, 1e-12, "conv2d vs sum of sliced matmuls, f64"))
}

/// Per-channel mean of the flattened rows equals `mean_bhd`.
pub fn flatten_mean(fault: bool) -> Result<Check> {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let n = 50;
    for _ in 0..n {
        let shape = vec![r.random_range(1..4), r.random_range(1..5), r.random_range(1..5), r.random_range(1..4)];
        let x = Tensor::<f64>::randn(shape, 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let m = g.mean_bhd(xv)?;
        let f = flatten_bhd(&x)?;
        let (rows, c) = (f.shape()[0], f.shape()[1]);
        let fv = g.constant(f.reshape(vec![rows, 1, 1, c])?)?;
        let mf = g.mean_bhd(fv)?;
        let mut a = to_f64(g.value(m));
        if fault {
            a[0] += 1.0;
        }
        worst = worst.max(max_abs(&a, &to_f64(g.value(mf))));
    }
    Ok(Check::bound("flatten_mean", n, worst, 0.0, "mean_bhd(flatten(x)) == mean_bhd(x), bitwise"))
}

fn randomize_bn<T: Scalar>(bns: &[&BnState], store: &mut ParamStore<T>, r: &mut ChaCha8Rng) -> Result<()> {
    for bn in bns {
        let c = bn.channels;
        store.set(bn.gamma, Tensor::rand_uniform(vec![c], 0.5, 1.5, r))?;
        store.set(bn.beta, Tensor::randn(vec![c], 0.5, r))?;
        store.set(bn.running_mean, Tensor::randn(vec![c], 0.5, r))?;
        store.set(bn.running_var, Tensor::rand_uniform(vec![c], 0.5, 2.0, r))?;
    }
    Ok(())
}

/// `BN(x * w)` against `x * M + b` in train mode. Every third instance
/// gives one output channel a batch variance near `1e-6`.
pub fn bn_fold_identity(fault: bool) -> Result<Check> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let n = 120;
    for i in 0..n {
        let (b, h, cin, cout) = (r.random_range(1..=3), r.random_range(3..=6), r.random_range(1..=4), r.random_range(1..=4));
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let padding = if i % 2 == 0 { Padding::Same } else { Padding::Valid };
        let x = Tensor::<f64>::randn(vec![b, h, h, cin], 1.0, &mut r);
        let mut w = Tensor::<f64>::randn(vec![k, k, cin, cout], 1.0, &mut r);
        if i % 3 == 0 {
            // A tiny kernel column gives channel 0 variance of order 1e-6.
            let scale = 1e-3 / (k * k * cin) as f64;
            for (j, v) in w.data_mut().iter_mut().enumerate() {
                if j % cout == 0 {
                    *v *= scale;
                }
            }
        }
        let mut store = ParamStore::new();
        let bn = BnState::register(&mut store, "bn", cout, 0.1, 1e-5)?;
        randomize_bn(&[&bn], &mut store, &mut r)?;
        let mut g = Graph::new();
        let binds = store.bind(&mut g)?;
        let xv = g.constant(x)?;
        let wv = g.constant(w)?;
        let y = g.conv2d(xv, wv, padding)?;
        let mut s1 = store.clone();
        let reference = bn_forward(&mut g, y, &bn, &binds, &mut s1, Mode::Train, false)?;
        let (m, bias) = batchnorm::bn_fold_forward(&mut g, xv, wv, padding, &bn, &binds, &mut store, Mode::Train, false)?;
        let folded = g.conv2d(xv, m, padding)?;
        let folded = g.add_channel(folded, bias)?;
        let mut a = to_f64(g.value(folded));
        if fault {
            a[0] *= 1.0 + 1e-6;
            a[0] += 1e-6;
        }
        worst = worst.max(max_abs(&a, &to_f64(g.value(reference))));
    }
    Ok(Check::bound("bn_fold", n, worst, 1e-9, "BN(conv(x,w)) vs conv(x,M)+b, f64, incl. variance ~1e-6"))
}

/// Topologies and channel counts exercised by the merge suites.
pub fn topology_cases() -> Vec<(Topology, usize, usize)> {
    vec![
        (Topology::Plain, 3, 4),
        (Topology::ConvBn, 3, 4),
        (Topology::ConvIdentity, 4, 4),
        (Topology::AcNet, 3, 4),
        (Topology::RepVgg, 4, 4),
        (Topology::RepVgg, 3, 5),
        (Topology::Chain, 3, 4),
    ]
}

/// Worst abs gap between expanded and merged block outputs.
pub fn merge_gap<T: Scalar>(topology: Topology, cin: usize, cout: usize, mode: Mode, seed: u64, fault: bool) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::<T>::new();
    let block = ReparamBlock::build(topology, cin, cout, 3, Some(BnConfig::default()), &mut store, "b", &mut r)?;
    let bns: Vec<&BnState> = block.bn_states().collect();
    randomize_bn(&bns, &mut store, &mut r)?;
    let x = Tensor::<T>::randn(vec![3, 6, 6, cin], 1.0, &mut r);
    let mut g = Graph::new();
    let binds = store.bind(&mut g)?;
    let xv = g.constant(x)?;
    let mut s1 = store.clone();
    let expanded = block_forward_expanded(&block, &mut g, &binds, &mut s1, xv, mode, false)?;
    let opts = MergeOptions {
        mode,
        stats: StatsMethod::Exact,
        update_running: false,
    };
    let merged = merged_forward(&block, &mut g, &binds, &mut store, xv, opts)?;
    let mut a = to_f64(g.value(merged));
    if fault {
        a[0] += 1e-3;
    }
    Ok(max_abs(&a, &to_f64(g.value(expanded))))
}

pub fn merge_equivalence(fault: bool) -> Result<Check> {
    let (mut w32, mut w64, mut n) = (0.0f64, 0.0f64, 0);
    for (t, cin, cout) in topology_cases() {
        for seed in 0..4 {
            for mode in [Mode::Train, Mode::Eval] {
                w32 = w32.max(merge_gap::<f32>(t, cin, cout, mode, seed, fault)?);
                w64 = w64.max(merge_gap::<f64>(t, cin, cout, mode, seed, fault)?);
                n += 1;
            }
        }
    }
    // Report against the tighter of the two bounds relative to its tolerance.
    let worst = (w32 / 1e-4).max(w64 / 1e-9);
    Ok(Check::bound(
        "merge_equivalence",
        n,
        worst,
        1.0,
        format!("expanded vs conv(x,M)+b: f32 {w32:.2e} (tol 1e-4), f64 {w64:.2e} (tol 1e-9); worst is gap/tol"),
    ))
}

fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

fn probe<T: Scalar>(g: &mut Graph<T>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.cast())?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p)?)
}

/// Parameter gradients through the expanded and the merged path; scale
/// relative error per parameter tensor.
pub fn merge_gradients(fault: bool) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (t, cin, cout) in topology_cases() {
        for seed in 0..3 {
            let mut r = rng(100 + seed);
            let mut store = ParamStore::<f64>::new();
            let block = ReparamBlock::build(t, cin, cout, 3, Some(BnConfig::default()), &mut store, "b", &mut r)?;
            let bns: Vec<&BnState> = block.bn_states().collect();
            randomize_bn(&bns, &mut store, &mut r)?;
            let x = Tensor::<f64>::randn(vec![2, 5, 5, cin], 1.0, &mut r);
            let weights = probe_weights(&[2, 5, 5, cout], 200 + seed);
            let grads = |merged: bool| -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let binds = store.bind(&mut g)?;
                let xv = g.constant(x.clone())?;
                let mut s = store.clone();
                let y = if merged {
                    merged_forward(&block, &mut g, &binds, &mut s, xv, MergeOptions::train(StatsMethod::Exact).frozen())?
                } else {
                    block_forward_expanded(&block, &mut g, &binds, &mut s, xv, Mode::Train, false)?
                };
                let loss = probe(&mut g, y, &weights)?;
                g.backward(loss)?;
                Ok(block
                    .param_ids()
                    .into_iter()
                    .filter(|&id| store.kind(id).trainable())
                    .map(|id| g.grad(binds.var(id)).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()]))
                    .collect())
            };
            let a = grads(false)?;
            let mut b = grads(true)?;
            if fault {
                b[0][0] += 1.0;
            }
            for (ga, gb) in a.iter().zip(&b) {
                let scale = ga.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-6);
                worst = worst.max(max_abs(ga, gb) / scale);
            }
            n += 1;
        }
    }
    Ok(Check::bound("merge_gradients", n, worst, 1e-3, "parameter gradients, expanded vs merged, f64"))
}

/// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1)` by central
/// differences with step `h`.
pub fn gradcheck(params: &[Tensor<f64>], h: f64, loss: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<repq::Result<Vec<_>>>()?;
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps.iter().map(|p| g.constant(p.clone())).collect::<repq::Result<Vec<_>>>()?;
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[p][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
        }
    }
    Ok(worst)
}

/// [`gradcheck`] over every trainable entry of `store`.
pub fn store_gradcheck(
    store: &ParamStore<f64>,
    h: f64,
    loss: &dyn Fn(&mut Graph<f64>, &repq::Bindings, &mut ParamStore<f64>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let binds = store.bind(&mut g)?;
    let l = loss(&mut g, &binds, &mut store.clone())?;
    g.backward(l)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let binds = s.bind(&mut g)?;
        let l = loss(&mut g, &binds, &mut s.clone())?;
        Ok(g.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for id in store.ids().filter(|&id| store.kind(id).trainable()) {
        let analytic = g.grad(binds.var(id)).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
        }
    }
    Ok(worst)
}

/// Finite-difference checks of the smooth ops: convolution in both
/// paddings, BN in train mode, and a merged RepVGG block.
pub fn gradcheck_suite(fault: bool) -> Result<Check> {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let bias = if fault { 1e-3 } else { 0.0 };
    let weights = probe_weights(&[2, 4, 4, 3], 5);
    for padding in [Padding::Valid, Padding::Same] {
        let x = Tensor::randn(vec![2, 4, 4, 2], 1.0, &mut r);
        let w = Tensor::randn(vec![3, 3, 2, 3], 1.0, &mut r);
        let pw = probe_weights(&[2, if padding == Padding::Same { 4 } else { 2 }, if padding == Padding::Same { 4 } else { 2 }, 3], 6);
        worst = worst.max(gradcheck(&[x, w], 1e-5, &|g, v| {
            let y = g.conv2d(v[0], v[1], padding)?;
            probe(g, y, &pw)
        })?);
    }
    let y = Tensor::randn(vec![2, 4, 4, 3], 1.0, &mut r);
    let gamma = Tensor::rand_uniform(vec![3], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(vec![3], 1.0, &mut r);
    worst = worst.max(gradcheck(&[y, gamma, beta], 1e-5, &|g, v| {
        let mu = g.mean_bhd(v[0])?;
        let var = g.var_bhd(v[0])?;
        let neg = g.neg(mu)?;
        let c = g.add_channel(v[0], neg)?;
        let ve = g.add_scalar(var, 1e-5)?;
        let sd = g.sqrt(ve)?;
        let inv = g.recip(sd)?;
        let n = g.mul_channel(c, inv)?;
        let s = g.mul_channel(n, v[1])?;
        let out = g.add_channel(s, v[2])?;
        probe(g, out, &weights)
    })?);
    let mut store = ParamStore::<f64>::new();
    let block = ReparamBlock::build(Topology::RepVgg, 3, 3, 3, Some(BnConfig::default()), &mut store, "b", &mut r)?;
    let bns: Vec<&BnState> = block.bn_states().collect();
    randomize_bn(&bns, &mut store, &mut r)?;
    let x = Tensor::randn(vec![2, 4, 4, 3], 1.0, &mut r);
    worst = worst.max(store_gradcheck(&store, 1e-5, &|g, binds, s| {
        let xv = g.constant(x.clone())?;
        let y = merged_forward(&block, g, binds, s, xv, MergeOptions::train(StatsMethod::Exact).frozen())?;
        probe(g, y, &weights)
    })?);
    Ok(Check::bound(
        "gradcheck",
        4,
        worst + bias,
        1e-6,
        "central differences (h=1e-5) vs backward: conv valid/same, BN, merged RepVGG",
    ))
}

/// Two backward passes over identical tapes give bitwise-equal gradients.
pub fn backward_determinism(fault: bool) -> Result<Check> {
    let mut r = rng(7);
    let x = Tensor::<f32>::randn(vec![8, 12, 12, 8], 1.0, &mut r);
    let w = Tensor::<f32>::randn(vec![3, 3, 8, 16], 0.2, &mut r);
    let run = || -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let xv = g.param(x.clone())?;
        let wv = g.param(w.clone())?;
        let y = g.conv2d(xv, wv, Padding::Same)?;
        let y = g.relu(y)?;
        let sq = g.square(y)?;
        let l = g.sum(sq)?;
        g.backward(l)?;
        let mut out = g.grad(wv).unwrap_or(&[]).to_vec();
        out.extend_from_slice(g.grad(xv).unwrap_or(&[]));
        Ok(out)
    };
    let a = run()?;
    let mut b = run()?;
    if fault {
        b[0] += 1.0;
    }
    let mismatches = a.iter().zip(&b).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    Ok(Check::bound("backward_determinism", 2, mismatches as f64, 0.0, "mismatching gradient bits between two runs"))
}

/// Exact batch mean and population variance of a valid convolution.
fn conv_stats(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let y = conv2d(x, w, Padding::Valid)?;
    let c = w.shape()[3];
    let n = (y.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, &v) in y.data().iter().enumerate() {
        mean[i % c] += v / n;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in y.data().iter().enumerate() {
        var[i % c] += (v - mean[i % c]).powi(2) / n;
    }
    Ok((mean, var))
}

fn estimates(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let wv = g.constant(w.clone())?;
    let m = bn_est_mean(&mut g, xv, wv)?;
    let v = bn_est_var(&mut g, xv, wv)?;
    Ok((to_f64(g.value(m)), to_f64(g.value(v))))
}

/// Input whose flattened channels are centered, mutually orthogonal
/// deviations plus per-channel offsets: its channel covariance is exactly
/// diagonal.
pub fn diagonal_covariance_input<R: Rng>(rows: usize, channels: usize, r: &mut R) -> Tensor<f64> {
    assert!(rows % (2 * channels) == 0, "rows must split into even per-channel blocks");
    let block = rows / channels;
    let mut data = vec![0.0; rows * channels];
    for c in 0..channels {
        let offset = r.random_range(-2.0..2.0);
        let amp = r.random_range(0.5..2.0);
        for row in 0..rows {
            let own = row / block == c;
            let dev = if own && (row % block) % 2 == 0 {
                amp
            } else if own {
                -amp
            } else {
                0.0
            };
            data[row * channels + c] = offset + dev;
        }
    }
    Tensor::new(vec![1, 1, rows, channels], data).expect("shape matches data")
}

/// Regimes where the estimated statistics are exact, plus `var >= 0`.
pub fn bnest_exactness(fault: bool) -> Result<Check> {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    let mut negatives = 0usize;
    let mut n = 0;
    let nudge = |v: &mut Vec<f64>| {
        if fault {
            v[0] += 1e-6;
        }
    };
    for _ in 0..30 {
        // 1x1 kernel: mean exact
        let x = Tensor::<f64>::randn(vec![2, 4, 5, 3], 1.5, &mut r).map(|v| v + 0.7);
        let w = Tensor::<f64>::randn(vec![1, 1, 3, 4], 1.0, &mut r);
        let (m, _) = conv_stats(&x, &w)?;
        let (mut e, _) = estimates(&x, &w)?;
        nudge(&mut e);
        worst = worst.max(max_abs(&m, &e));
        // constant input: mean exact for any kernel
        let c = r.random_range(-3.0..3.0);
        let x = Tensor::<f64>::full(vec![2, 6, 6, 2], c);
        let w = Tensor::<f64>::randn(vec![3, 3, 2, 3], 1.0, &mut r);
        let (m, _) = conv_stats(&x, &w)?;
        let (e, _) = estimates(&x, &w)?;
        worst = worst.max(max_abs(&m, &e));
        // diagonal covariance, 1x1 kernel: variance exact
        let x = diagonal_covariance_input(24, 3, &mut r);
        let w = Tensor::<f64>::randn(vec![1, 1, 3, 4], 1.0, &mut r);
        let (_, v) = conv_stats(&x, &w)?;
        let (_, ev) = estimates(&x, &w)?;
        worst = worst.max(max_abs(&v, &ev));
        // arbitrary input and kernel: variance estimate nonnegative
        let x = Tensor::<f64>::randn(vec![2, 4, 4, 3], r.random_range(0.0..3.0), &mut r);
        let w = Tensor::<f64>::randn(vec![3, 1, 3, 2], 1.0, &mut r);
        let (_, ev) = estimates(&x, &w)?;
        negatives += ev.iter().filter(|&&v| v < 0.0).count();
        n += 4;
    }
    let mut check = Check::bound(
        "bnest_exactness",
        n,
        worst,
        1e-9,
        format!("mean (1x1, constant input), variance (1x1, diagonal covariance); {negatives} negative variance estimates"),
    );
    check.passed &= negatives == 0;
    Ok(check)
}

/// Median relative error of the estimated mean for a 3x3 valid convolution
/// at each feature-map size.
pub fn edge_effect_medians(sizes: &[usize], seeds: u64) -> Result<Vec<f64>> {
    let (cin, cout) = (3, 4);
    sizes
        .iter()
        .map(|&hw| {
            let mut errs = Vec::new();
            for seed in 0..seeds {
                let mut r = rng(1000 + seed);
                // Positive inputs and kernels keep the true mean away from 0.
                let x = Tensor::<f64>::rand_uniform(vec![2, hw, hw, cin], 0.0, 2.0, &mut r);
                let w = Tensor::<f64>::rand_uniform(vec![3, 3, cin, cout], 0.1, 1.0, &mut r);
                let (m, _) = conv_stats(&x, &w)?;
                let (e, _) = estimates(&x, &w)?;
                errs.extend(m.iter().zip(&e).map(|(a, b)| (a - b).abs() / a.abs()));
            }
            errs.sort_by(f64::total_cmp);
            let k = errs.len();
            Ok(if k % 2 == 1 {
                errs[k / 2]
            } else {
                0.5 * (errs[k / 2 - 1] + errs[k / 2])
            })
        })
        .collect()
}

pub fn edge_effect(fault: bool) -> Result<Check> {
    let sizes = [8, 16, 32, 64];
    let mut med = edge_effect_medians(&sizes, 20)?;
    if fault {
        med.reverse();
    }
    let increases: Vec<String> = med
        .windows(2)
        .zip(sizes.windows(2))
        .filter(|(m, _)| m[1] > m[0])
        .map(|(m, s)| format!("H={} {:.3e} > H={} {:.3e}", s[1], m[1], s[0], m[0]))
        .collect();
    let mut check = Check::failures("edge_effect", 20 * sizes.len(), increases);
    check.detail = format!(
        "median relative mean error, 3x3 kernel, H=D in {sizes:?}: {} ({})",
        med.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", "),
        check.detail
    );
    Ok(check)
}

fn q_reference(v: f64, s: f64, range: QuantRange) -> f64 {
    let k = (v / s).round_ties_even().clamp(range.qmin(), range.qmax());
    k * s
}

/// Idempotence, lattice membership, monotonicity and zero saturation
/// gradient on 1e5 samples; MinError never beaten by a grid candidate.
pub fn quantizer_properties(fault: bool) -> Result<Check> {
    let mut r = rng(9);
    let mut failures = Vec::new();
    let samples = 100_000;
    let ranges = [(2, false), (4, false), (8, false), (2, true), (4, true), (8, true)];
    for (bits, signed) in ranges {
        let range = QuantRange::new(bits, signed)?;
        let s = r.random_range(0.01..2.0);
        let n = samples / ranges.len();
        let lim = 1.5 * s * range.qmax().max(-range.qmin());
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-lim..lim)).collect();
        let mut q: Vec<f64> = v.iter().map(|&x| fake_quantize(x, s, range)).collect();
        if fault {
            q[0] += 0.5 * s;
        }
        let tag = format!("{bits}-bit {}", if signed { "signed" } else { "unsigned" });
        let mut bad = [0usize; 4];
        for (&x, &y) in v.iter().zip(&q) {
            if fake_quantize(y, s, range) != y {
                bad[0] += 1;
            }
            let k = y / s;
            if (k - k.round()).abs() > 1e-9 || k < range.qmin() - 1e-9 || k > range.qmax() + 1e-9 {
                bad[1] += 1;
            }
            if (y - q_reference(x, s, range)).abs() > 1e-12 * s.max(1.0) {
                bad[1] += 1;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        bad[2] = order.windows(2).filter(|p| q[p[0]] > q[p[1]]).count();
        // Saturated inputs get no input gradient.
        let mut g = Graph::<f64>::new();
        let vt = g.param(Tensor::new(vec![n], v.clone())?)?;
        let st = g.param(Tensor::new(vec![1], vec![s])?)?;
        let qv = g.quantize(vt, st, range.params(n))?;
        let l = g.sum(qv)?;
        g.backward(l)?;
        let grad = g.grad(vt).unwrap_or(&[]);
        bad[3] = v
            .iter()
            .zip(grad)
            .filter(|(&x, &gr)| (x / s > range.qmax() + 0.5 || x / s < range.qmin() - 0.5) && gr != 0.0)
            .count();
        for (name, count) in ["idempotence", "lattice", "monotonicity", "saturation gradient"].iter().zip(bad) {
            if count > 0 {
                failures.push(format!("{tag}: {count} {name} violations"));
            }
        }
    }
    let mut grid_cases = 0;
    for c in 0..200 {
        let range = QuantRange::new([2, 3, 4, 8][c % 4], c % 2 == 0)?;
        let vals: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0) * (1.0 + c as f64 * 0.05)).collect();
        let choice = min_error_step(&vals, range);
        let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut reported = choice.error;
        if fault {
            reported *= 2.0;
            reported += 1.0;
        }
        for s in step_grid(max_abs, range.qmax()) {
            let err: f64 = vals.iter().map(|&v| (q_reference(v, s, range) - v).powi(2)).sum();
            if err < reported - 1e-12 {
                failures.push(format!("case {c}: step {s:.4e} error {err:.4e} beats chosen {reported:.4e}"));
                break;
            }
        }
        debug_assert_eq!(reconstruction_error(&vals, choice.step, range), choice.error);
        grid_cases += 1;
    }
    failures.truncate(8);
    let mut check = Check::failures("quantizer", samples + grid_cases, failures);
    if check.passed {
        check.detail = format!("{samples} samples over 6 ranges, {grid_cases} MinError grid sweeps");
    }
    Ok(check)
}

/// Minimal bit-width holding every product, by direct enumeration.
pub fn enumerated_product_bits(a: u32, b: u32, signed: bool) -> u32 {
    let values = |bits: u32| -> Vec<i64> {
        if signed {
            (-(1i64 << (bits - 1))..(1i64 << (bits - 1))).collect()
        } else {
            (0..(1i64 << bits)).collect()
        }
    };
    let (va, vb) = (values(a), values(b));
    let (mut lo, mut hi) = (0i64, 0i64);
    for &x in &va {
        for &y in &vb {
            lo = lo.min(x * y);
            hi = hi.max(x * y);
        }
    }
    (1..64)
        .find(|&n| {
            if signed {
                -(1i64 << (n - 1)) <= lo && hi < (1i64 << (n - 1))
            } else {
                hi < (1i64 << n)
            }
        })
        .expect("fits in 63 bits")
}

/// `product_bits` against enumeration for every pair up to 8 bits, the
/// `[0, 9]` example, and doubling of equal widths from 2 bits up.
///
/// Equal 1-bit unsigned operands are the exception to doubling: their
/// products `{0, 1}` fit in one bit.
pub fn product_bits_table(fault: bool) -> Result<Check> {
    let mut failures = Vec::new();
    let mut n = 0;
    let pb = |a, b, s| product_bits(a, b, s) + u32::from(fault && a == 2 && b == 2);
    for signed in [false, true] {
        let lo = if signed { 2 } else { 1 };
        for a in lo..=8 {
            for b in lo..=8 {
                let (got, want) = (pb(a, b, signed), enumerated_product_bits(a, b, signed));
                if got != want {
                    failures.push(format!("({a},{b},{}) = {got}, enumeration gives {want}", if signed { "signed" } else { "unsigned" }));
                }
                n += 1;
            }
        }
    }
    if pb(2, 2, false) != 4 {
        failures.push(format!("(2,2,unsigned) = {}, expected 4 for products in [0, 9]", pb(2, 2, false)));
    }
    for b in 2..=8 {
        if pb(b, b, false) != 2 * b {
            failures.push(format!("({b},{b},unsigned) = {}, expected {}", pb(b, b, false), 2 * b));
        }
    }
    failures.truncate(8);
    Ok(Check::failures("product_bits", n, failures))
}
