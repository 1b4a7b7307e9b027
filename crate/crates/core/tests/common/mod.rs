#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repq::{Graph, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over every
/// element of every parameter, using central differences with step `h`.
///
/// `loss` builds the scalar loss from leaves holding `params`; it is called
/// once with gradient-tracking leaves and twice per element with constants.
/// `skip(p, i)` excludes elements near known discontinuities.
pub fn gradcheck(
    params: &[Tensor<f64>],
    h: f64,
    loss: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    skip: impl Fn(usize, usize) -> bool,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let l = loss(&mut g, &vars).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
        let l = loss(&mut g, &vars).unwrap();
        g.value(l).data()[0]
    };

    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            if skip(p, i) {
                continue;
            }
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Weighted sum `sum(y * r)` with fixed random weights, a loss that gives
/// every output element a distinct gradient.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed));
    let r = g.constant(r)?;
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

pub fn probe_loss32(g: &mut Graph<f32>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed));
    let r = g.constant(r)?;
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

/// Direct sliding-window cross-correlation in f64, valid or same padding.
pub fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, same: bool) -> Tensor<f64> {
    let (b, h, d, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ph, pw) = if same { ((kh - 1) / 2, (kw - 1) / 2) } else { (0, 0) };
    let (oh, od) = if same { (h, d) } else { (h - kh + 1, d - kw + 1) };
    let mut out = Tensor::zeros(vec![b, oh, od, cout]);
    for n in 0..b {
        for r in 0..oh {
            for c in 0..od {
                for o in 0..cout {
                    let mut s = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            let (ih, iw) = (r as isize + i as isize - ph as isize, c as isize + j as isize - pw as isize);
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= d as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.at(&[n, ih as usize, iw as usize, ci]) * w.at(&[i, j, ci, o]);
                            }
                        }
                    }
                    out.set(&[n, r, c, o], s);
                }
            }
        }
    }
    out
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}
