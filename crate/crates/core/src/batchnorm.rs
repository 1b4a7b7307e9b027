//! Batch normalization, folding BN into the preceding convolution, and
//! estimating BN statistics from input statistics and kernel sums.
//!
//! Folding: for `Y = X * W` with per-channel statistics `mu`, `var`,
//!
//! ```text
//! BN(Y) = (Y - mu) / sqrt(var + eps) * gamma + beta = X * M + b
//! M     = W * gamma / sqrt(var + eps)      (broadcast over OUT)
//! b     = beta - mu * gamma / sqrt(var + eps)
//! ```
//!
//! Estimation replaces `mu`, `var` by
//!
//! ```text
//! mean(X) . sum_{h,d} W[h,d]        var(X) . sum_{h,d} W[h,d]^2
//! ```
//!
//! which costs `O(B*H*D*IN + Kh*Kw*IN*OUT)` and never builds `X * W`.

use crate::error::{Error, Result};
use crate::graph::{CostKind, Graph, Var};
use crate::kernels::Padding;
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How train-mode BN obtains its batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMethod {
    /// Materialize the convolution output and measure it.
    Exact,
    /// Estimate from input moments and kernel sums.
    Estimate,
}

/// Handles to one BN layer's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BnState {
    /// Register `gamma = 1`, `beta = 0`, running mean 0 and running var 1.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Invalid(format!("BN momentum {} outside (0, 1]", momentum)));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("BN epsilon {} must be positive", eps)));
        }
        Ok(BnState {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::Affine, Tensor::full(vec![channels], T::one())),
            beta: store.add(format!("{prefix}.beta"), ParamKind::Affine, Tensor::zeros(vec![channels])),
            running_mean: store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![channels])),
            running_var: store.add(
                format!("{prefix}.running_var"),
                ParamKind::Buffer,
                Tensor::full(vec![channels], T::one()),
            ),
            momentum,
            eps,
            channels,
        })
    }
}

/// Run `f` with forward multiplies charged to [`CostKind::Stats`].
pub fn as_stats<T: Scalar, R>(g: &mut Graph<T>, f: impl FnOnce(&mut Graph<T>) -> Result<R>) -> Result<R> {
    let prev = g.set_cost_kind(CostKind::Stats);
    let r = f(g);
    g.set_cost_kind(prev);
    r
}

/// Per-channel mean and population variance of `y`.
pub fn batch_stats<T: Scalar>(g: &mut Graph<T>, y: Var) -> Result<(Var, Var)> {
    as_stats(g, |g| Ok((g.mean_bhd(y)?, g.var_bhd(y)?)))
}

/// Momentum update of the running statistics:
/// `running = (1 - m) * running + m * batch`.
pub fn update_running<T: Scalar>(store: &mut ParamStore<T>, bn: &BnState, mu: &[T], var: &[T]) -> Result<()> {
    if mu.len() != bn.channels || var.len() != bn.channels {
        return Err(Error::Shape {
            op: "update_running",
            detail: format!("{} / {} statistics for {} channels", mu.len(), var.len(), bn.channels),
        });
    }
    let m = T::of(bn.momentum);
    let keep = T::one() - m;
    for (id, batch) in [(bn.running_mean, mu), (bn.running_var, var)] {
        for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
            *r = keep * *r + m * b;
        }
    }
    Ok(())
}

/// `1 / sqrt(var + eps)`, rejecting non-positive radicands.
fn inv_std<T: Scalar>(g: &mut Graph<T>, var: Var, eps: f64) -> Result<Var> {
    if let Some(bad) = g.value(var).data().iter().find(|&&v| v.as_f64() + eps <= 0.0) {
        return Err(Error::Invalid(format!("var + eps = {} is not positive", bad.as_f64() + eps)));
    }
    let shifted = g.add_scalar(var, eps)?;
    let sd = g.sqrt(shifted)?;
    g.recip(sd)
}

/// Normalize `y: [.., C]` per channel.
///
/// Train mode normalizes with batch statistics and, when `update` is set,
/// folds them into the running statistics. Eval mode uses the running
/// statistics.
pub fn bn_forward<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    bn: &BnState,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    mode: Mode,
    update: bool,
) -> Result<Var> {
    if g.value(y).channels() != bn.channels {
        return Err(Error::Shape {
            op: "bn_forward",
            detail: format!("input has {} channels, BN has {}", g.value(y).channels(), bn.channels),
        });
    }
    let (mu, var) = match mode {
        Mode::Train => {
            let (mu, var) = batch_stats(g, y)?;
            if update {
                let (m, v) = (g.value(mu).data().to_vec(), g.value(var).data().to_vec());
                update_running(store, bn, &m, &v)?;
            }
            (mu, var)
        }
        Mode::Eval => (binds.var(bn.running_mean), binds.var(bn.running_var)),
    };
    let neg_mu = g.neg(mu)?;
    let centered = g.add_channel(y, neg_mu)?;
    let inv = inv_std(g, var, bn.eps)?;
    let normed = g.mul_channel(centered, inv)?;
    let scaled = g.mul_channel(normed, binds.var(bn.gamma))?;
    g.add_channel(scaled, binds.var(bn.beta))
}

/// Fold BN into a kernel whose trailing dimension is the BN channel axis.
/// Returns `(M, b)` with `X * M + b == BN(X * W)` for the given statistics.
pub fn bn_fold<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    mu: Var,
    var: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Var)> {
    let c = g.value(w).channels();
    for (name, v) in [("mean", mu), ("variance", var), ("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != [c] {
            return Err(Error::Shape {
                op: "bn_fold",
                detail: format!("{} has shape {:?}, kernel has {} output channels", name, g.shape(v), c),
            });
        }
    }
    let inv = inv_std(g, var, eps)?;
    let scale = g.mul(inv, gamma)?;
    let merged = g.mul_channel(w, scale)?;
    let shift = g.mul(mu, scale)?;
    let bias = g.sub(beta, shift)?;
    Ok((merged, bias))
}

fn check_est_shapes<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, w: Var) -> Result<()> {
    let (sx, sw) = (g.shape(x), g.shape(w));
    if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
        return Err(Error::Shape {
            op,
            detail: format!("input {:?} with kernel {:?}", sx, sw),
        });
    }
    Ok(())
}

/// `[IN] x [IN, OUT] -> [OUT]`.
fn contract<T: Scalar>(g: &mut Graph<T>, v: Var, m: Var) -> Result<Var> {
    let n = g.shape(v)[0];
    let row = g.reshape(v, &[1, n])?;
    let prod = g.matmul(row, m)?;
    let out = g.shape(m)[1];
    g.reshape(prod, &[out])
}

/// Estimated per-channel mean of `x * w`: `mean_bhd(x) . sum_{h,d} w[h,d]`.
pub fn bn_est_mean<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    check_est_shapes(g, "bn_est_mean", x, w)?;
    as_stats(g, |g| {
        let mean = g.mean_bhd(x)?;
        let wsum = g.sum_spatial(w)?;
        contract(g, mean, wsum)
    })
}

/// Estimated per-channel variance of `x * w`: `var_bhd(x) . sum_{h,d} w[h,d]^2`.
/// Treats the input channel covariance as diagonal and ignores border taps.
pub fn bn_est_var<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    check_est_shapes(g, "bn_est_var", x, w)?;
    as_stats(g, |g| {
        let var = g.var_bhd(x)?;
        let w2 = g.square(w)?;
        let wsum = g.sum_spatial(w2)?;
        contract(g, var, wsum)
    })
}

/// `BN(x * w)` folded into `(M, b)` with the statistics taken from the
/// materialized convolution output (train) or the running buffers (eval).
pub fn bn_fold_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    padding: Padding,
    bn: &BnState,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    mode: Mode,
    update: bool,
) -> Result<(Var, Var)> {
    let (mu, var) = match mode {
        Mode::Train => {
            let y = as_stats(g, |g| g.conv2d(x, w, padding))?;
            let (mu, var) = batch_stats(g, y)?;
            if update {
                let (m, v) = (g.value(mu).data().to_vec(), g.value(var).data().to_vec());
                update_running(store, bn, &m, &v)?;
            }
            (mu, var)
        }
        Mode::Eval => (binds.var(bn.running_mean), binds.var(bn.running_var)),
    };
    bn_fold(g, w, mu, var, binds.var(bn.gamma), binds.var(bn.beta), bn.eps)
}

/// Like [`bn_fold_forward`] but train mode skips the convolution and
/// substitutes the estimated statistics, which also feed the running
/// update. Eval mode is identical to ordinary folding.
pub fn bn_est_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bn: &BnState,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    mode: Mode,
    update: bool,
) -> Result<(Var, Var)> {
    let (mu, var) = match mode {
        Mode::Train => {
            let mu = bn_est_mean(g, x, w)?;
            let var = bn_est_var(g, x, w)?;
            if update {
                let (m, v) = (g.value(mu).data().to_vec(), g.value(var).data().to_vec());
                update_running(store, bn, &m, &v)?;
            }
            (mu, var)
        }
        Mode::Eval => (binds.var(bn.running_mean), binds.var(bn.running_var)),
    };
    bn_fold(g, w, mu, var, binds.var(bn.gamma), binds.var(bn.beta), bn.eps)
}
