//! Re-parametrized blocks and their differentiable merged weight.
//!
//! A block is a sum of branches; each branch is a chain of convolutions,
//! BN layers, per-channel scales and identities. For any such block the
//! output equals a single same-padded convolution `x * M + b` where `M` and
//! `b` are differentiable functions of the branch parameters (and of the
//! batch, when a branch holds train-mode BN).

use rand::Rng;

use crate::batchnorm::{self, BnState, Mode, StatsMethod};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[Kh, Kw, IN, OUT]` kernel, same padding.
    Conv { weight: ParamId },
    Bn(BnState),
    /// Per-channel multiplier `[C]`.
    Scale { scale: ParamId },
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<Primitive>,
}

/// Catalogued block layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    /// A single convolution.
    Plain,
    /// Convolution followed by BN.
    ConvBn,
    /// Convolution plus a skip connection.
    ConvIdentity,
    /// `KxK`, `1xK` and `Kx1` convolutions, each followed by BN.
    AcNet,
    /// BN(`KxK`) + BN(`1x1`) + BN(identity).
    RepVgg,
    /// `KxK` convolution followed by a `1x1` convolution.
    Chain,
}

impl Topology {
    pub const ALL: [Topology; 6] = [
        Topology::Plain,
        Topology::ConvBn,
        Topology::ConvIdentity,
        Topology::AcNet,
        Topology::RepVgg,
        Topology::Chain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Plain => "plain",
            Topology::ConvBn => "conv_bn",
            Topology::ConvIdentity => "conv_identity",
            Topology::AcNet => "acnet",
            Topology::RepVgg => "repvgg",
            Topology::Chain => "chain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// BN hyperparameters for block construction; `None` builds BN-free blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: batchnorm::DEFAULT_MOMENTUM,
            eps: batchnorm::DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamBlock {
    pub branches: Vec<Branch>,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

/// How [`merged_weight`] and [`block_forward_expanded`] treat BN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeOptions {
    pub mode: Mode,
    pub stats: StatsMethod,
    /// Apply the momentum update to running statistics (train mode only).
    pub update_running: bool,
}

impl MergeOptions {
    pub fn train(stats: StatsMethod) -> Self {
        MergeOptions {
            mode: Mode::Train,
            stats,
            update_running: true,
        }
    }

    pub fn eval() -> Self {
        MergeOptions {
            mode: Mode::Eval,
            stats: StatsMethod::Exact,
            update_running: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.update_running = false;
        self
    }
}

fn he_kernel<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    Tensor::randn(shape.to_vec(), (2.0 / fan_in).sqrt(), rng)
}

impl ReparamBlock {
    /// Validate a block against the parameter shapes in `store`.
    pub fn new<T: Scalar>(
        branches: Vec<Branch>,
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Invalid("a block needs at least one branch".into()));
        }
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::Invalid(format!("target kernel {}x{} must be odd", kernel.0, kernel.1)));
        }
        for (bi, branch) in branches.iter().enumerate() {
            let mut c = in_channels;
            let mut spatial = (1, 1);
            let mut big_convs = 0;
            for layer in &branch.layers {
                match layer {
                    Primitive::Conv { weight } => {
                        let s = store.get(*weight).shape();
                        if s.len() != 4 || s[2] != c {
                            return Err(Error::Shape {
                                op: "reparam_block",
                                detail: format!("branch {bi}: kernel {:?} after {} channels", s, c),
                            });
                        }
                        if s[0] % 2 == 0 || s[1] % 2 == 0 {
                            return Err(Error::Invalid(format!("branch {bi}: kernel {:?} is not odd-sized", s)));
                        }
                        if s[0] > 1 || s[1] > 1 {
                            big_convs += 1;
                            spatial = (s[0], s[1]);
                        }
                        c = s[3];
                    }
                    Primitive::Bn(bn) => {
                        if bn.channels != c {
                            return Err(Error::Shape {
                                op: "reparam_block",
                                detail: format!("branch {bi}: BN over {} channels after {}", bn.channels, c),
                            });
                        }
                    }
                    Primitive::Scale { scale } => {
                        if store.get(*scale).shape() != [c] {
                            return Err(Error::Shape {
                                op: "reparam_block",
                                detail: format!("branch {bi}: scale {:?} after {} channels", store.get(*scale).shape(), c),
                            });
                        }
                    }
                    Primitive::Identity => {}
                }
            }
            if big_convs > 1 {
                return Err(Error::Unsupported(format!(
                    "branch {bi} chains {} convolutions larger than 1x1",
                    big_convs
                )));
            }
            if spatial.0 > kernel.0 || spatial.1 > kernel.1 {
                return Err(Error::Shape {
                    op: "reparam_block",
                    detail: format!("branch {bi}: {:?} kernel exceeds target {:?}", spatial, kernel),
                });
            }
            if c != out_channels {
                return Err(Error::Shape {
                    op: "reparam_block",
                    detail: format!("branch {bi} ends with {} channels, block has {}", c, out_channels),
                });
            }
        }
        Ok(ReparamBlock {
            branches,
            kernel,
            in_channels,
            out_channels,
        })
    }

    /// Build a catalogued block with He-initialized kernels.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        topology: Topology,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        bn: Option<BnConfig>,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("kernel size {} must be odd", k)));
        }
        let (cin, cout) = (in_channels, out_channels);
        let mut conv = |store: &mut ParamStore<T>, name: &str, shape: [usize; 4]| Primitive::Conv {
            weight: store.add(format!("{prefix}.{name}.weight"), ParamKind::Weight, he_kernel(shape, rng)),
        };
        let bn_layer = |store: &mut ParamStore<T>, name: &str, c: usize| -> Result<Option<Primitive>> {
            bn.map(|cfg| BnState::register(store, &format!("{prefix}.{name}"), c, cfg.momentum, cfg.eps).map(Primitive::Bn))
                .transpose()
        };
        let mut branches = Vec::new();
        match topology {
            Topology::Plain => branches.push(vec![conv(store, "conv", [k, k, cin, cout])]),
            Topology::ConvBn => {
                let mut b = vec![conv(store, "conv", [k, k, cin, cout])];
                b.extend(bn_layer(store, "bn", cout)?);
                branches.push(b);
            }
            Topology::ConvIdentity => {
                if cin != cout {
                    return Err(Error::Invalid("identity branch needs IN == OUT".into()));
                }
                branches.push(vec![conv(store, "conv", [k, k, cin, cout])]);
                branches.push(vec![Primitive::Identity]);
            }
            Topology::AcNet => {
                for (name, shape) in [("square", [k, k, cin, cout]), ("hor", [1, k, cin, cout]), ("ver", [k, 1, cin, cout])] {
                    let mut b = vec![conv(store, name, shape)];
                    b.extend(bn_layer(store, &format!("{name}_bn"), cout)?);
                    branches.push(b);
                }
            }
            Topology::RepVgg => {
                for (name, shape) in [("dense", [k, k, cin, cout]), ("point", [1, 1, cin, cout])] {
                    let mut b = vec![conv(store, name, shape)];
                    b.extend(bn_layer(store, &format!("{name}_bn"), cout)?);
                    branches.push(b);
                }
                if cin == cout {
                    let mut b = vec![Primitive::Identity];
                    b.extend(bn_layer(store, "identity_bn", cout)?);
                    branches.push(b);
                }
            }
            Topology::Chain => {
                let mut b = vec![conv(store, "first", [k, k, cin, cout])];
                b.extend(bn_layer(store, "first_bn", cout)?);
                b.push(conv(store, "second", [1, 1, cout, cout]));
                b.extend(bn_layer(store, "second_bn", cout)?);
                branches.push(b);
            }
        }
        let branches = branches.into_iter().map(|layers| Branch { layers }).collect();
        ReparamBlock::new(branches, (k, k), cin, cout, store)
    }

    pub fn has_bn(&self) -> bool {
        self.branches
            .iter()
            .any(|b| b.layers.iter().any(|l| matches!(l, Primitive::Bn(_))))
    }

    pub fn bn_states(&self) -> impl Iterator<Item = &BnState> {
        self.branches.iter().flat_map(|b| {
            b.layers.iter().filter_map(|l| match l {
                Primitive::Bn(bn) => Some(bn),
                _ => None,
            })
        })
    }

    /// Every parameter the block refers to, in branch order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.branches {
            for l in &b.layers {
                match l {
                    Primitive::Conv { weight } => ids.push(*weight),
                    Primitive::Scale { scale } => ids.push(*scale),
                    Primitive::Bn(bn) => ids.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]),
                    Primitive::Identity => {}
                }
            }
        }
        ids
    }
}

/// Dirac kernel: `K[ch, cw, c, c] = 1` at the center tap, zero elsewhere.
pub fn identity_kernel<T: Scalar>(channels: usize, target: (usize, usize)) -> Result<Tensor<T>> {
    if channels == 0 {
        return Err(Error::Invalid("identity kernel needs at least one channel".into()));
    }
    if target.0 % 2 == 0 || target.1 % 2 == 0 {
        return Err(Error::Invalid(format!("identity kernel {}x{} must be odd", target.0, target.1)));
    }
    let mut k = Tensor::zeros(vec![target.0, target.1, channels, channels]);
    for c in 0..channels {
        k.set(&[target.0 / 2, target.1 / 2, c, c], T::one());
    }
    Ok(k)
}

/// Center-pad each kernel to `target` and sum them.
pub fn merge_parallel<T: Scalar>(g: &mut Graph<T>, kernels: &[Var], target: (usize, usize)) -> Result<Var> {
    let Some((&first, rest)) = kernels.split_first() else {
        return Err(Error::Invalid("merge_parallel needs at least one kernel".into()));
    };
    let channels = |g: &Graph<T>, v: Var| {
        let s = g.shape(v);
        (s.len() == 4).then(|| (s[2], s[3]))
    };
    let want = channels(g, first);
    let mut acc = g.pad_kernel(first, target)?;
    for &k in rest {
        if channels(g, k) != want {
            return Err(Error::Shape {
                op: "merge_parallel",
                detail: format!("kernel {:?} does not match channels {:?}", g.shape(k), want),
            });
        }
        let padded = g.pad_kernel(k, target)?;
        acc = g.add(acc, padded)?;
    }
    Ok(acc)
}

/// Kernel equivalent to applying `first` then `second`, where one of the
/// two is `1x1`.
///
/// With `second: [1, 1, M, OUT]`: `out[i,j,c,o] = sum_m first[i,j,c,m] second[0,0,m,o]`.
/// With `first: [1, 1, C, M]`: `out[i,j,c,o] = sum_m first[0,0,c,m] second[i,j,m,o]`.
pub fn merge_sequential<T: Scalar>(g: &mut Graph<T>, first: Var, second: Var) -> Result<Var> {
    let (s1, s2) = (g.shape(first).to_vec(), g.shape(second).to_vec());
    if s1.len() != 4 || s2.len() != 4 || s1[3] != s2[2] {
        return Err(Error::Shape {
            op: "merge_sequential",
            detail: format!("{:?} then {:?}", s1, s2),
        });
    }
    let (mid, out) = (s1[3], s2[3]);
    if s2[0] == 1 && s2[1] == 1 {
        let (kh, kw, c) = (s1[0], s1[1], s1[2]);
        let a = g.reshape(first, &[kh * kw * c, mid])?;
        let b = g.reshape(second, &[mid, out])?;
        let prod = g.matmul(a, b)?;
        g.reshape(prod, &[kh, kw, c, out])
    } else if s1[0] == 1 && s1[1] == 1 {
        let (kh, kw, c) = (s2[0], s2[1], s1[2]);
        let a = g.reshape(first, &[c, mid])?;
        let moved = g.permute(second, &[2, 0, 1, 3])?;
        let b = g.reshape(moved, &[mid, kh * kw * out])?;
        let prod = g.matmul(a, b)?;
        let prod = g.reshape(prod, &[c, kh, kw, out])?;
        g.permute(prod, &[1, 2, 0, 3])
    } else {
        Err(Error::Unsupported(format!(
            "sequential merge of {}x{} and {}x{} kernels",
            s1[0], s1[1], s2[0], s2[1]
        )))
    }
}

/// `[C] x [C, O] -> [O]`.
fn vec_mat<T: Scalar>(g: &mut Graph<T>, v: Var, m: Var) -> Result<Var> {
    let n = g.shape(v)[0];
    let o = g.shape(m)[1];
    let row = g.reshape(v, &[1, n])?;
    let prod = g.matmul(row, m)?;
    g.reshape(prod, &[o])
}

/// Running state while folding one branch: `branch(x) = x * kernel + bias`,
/// where a missing kernel is the identity map.
struct BranchFold {
    kernel: Option<Var>,
    bias: Option<Var>,
    channels: usize,
}

impl BranchFold {
    fn kernel_or_identity<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        match self.kernel {
            Some(k) => Ok(k),
            None => g.constant(identity_kernel(self.channels, (1, 1))?),
        }
    }
}

/// Merged kernel `M: [Kh, Kw, IN, OUT]` and bias `b: [OUT]` of a block.
///
/// Per branch: convolutions compose through [`merge_sequential`], BN folds
/// into the kernel accumulated so far, scales multiply it. A bias that
/// enters a later convolution `W2` becomes `b . sum_{h,d} W2` (exact when
/// `W2` is `1x1`). Branch kernels are then centered in the target size and
/// summed, and branch biases are summed.
///
/// `x` is needed only in train mode when the block holds BN.
pub fn merged_weight<T: Scalar>(
    block: &ReparamBlock,
    g: &mut Graph<T>,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    x: Option<Var>,
    opts: MergeOptions,
) -> Result<(Var, Var)> {
    let mut kernels = Vec::with_capacity(block.branches.len());
    let mut bias: Option<Var> = None;
    for branch in &block.branches {
        let mut st = BranchFold {
            kernel: None,
            bias: None,
            channels: block.in_channels,
        };
        for layer in &branch.layers {
            match layer {
                Primitive::Identity => {}
                Primitive::Conv { weight } => {
                    let w = binds.var(*weight);
                    if let Some(b) = st.bias {
                        let wsum = g.sum_spatial(w)?;
                        st.bias = Some(vec_mat(g, b, wsum)?);
                    }
                    st.kernel = Some(match st.kernel {
                        None => w,
                        Some(k) => merge_sequential(g, k, w)?,
                    });
                    st.channels = g.shape(w)[3];
                }
                Primitive::Scale { scale } => {
                    let k = st.kernel_or_identity(g)?;
                    let s = binds.var(*scale);
                    st.kernel = Some(g.mul_channel(k, s)?);
                    if let Some(b) = st.bias {
                        st.bias = Some(g.mul(b, s)?);
                    }
                }
                Primitive::Bn(bn) => fold_bn_into(g, binds, store, x, opts, bn, &mut st)?,
            }
        }
        let k = match st.kernel {
            Some(k) => k,
            None => g.constant(identity_kernel(st.channels, (1, 1))?)?,
        };
        kernels.push(k);
        if let Some(b) = st.bias {
            bias = Some(match bias {
                None => b,
                Some(acc) => g.add(acc, b)?,
            });
        }
    }
    let merged = merge_parallel(g, &kernels, block.kernel)?;
    let bias = match bias {
        Some(b) => b,
        None => g.constant(Tensor::zeros(vec![block.out_channels]))?,
    };
    Ok((merged, bias))
}

fn fold_bn_into<T: Scalar>(
    g: &mut Graph<T>,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    x: Option<Var>,
    opts: MergeOptions,
    bn: &BnState,
    st: &mut BranchFold,
) -> Result<()> {
    let kernel = st.kernel_or_identity(g)?;
    let (mu, var) = match opts.mode {
        Mode::Eval => (binds.var(bn.running_mean), binds.var(bn.running_var)),
        Mode::Train => {
            let x = x.ok_or_else(|| Error::Invalid("train-mode BN folding needs the block input".into()))?;
            let (mu, var) = match (opts.stats, st.kernel) {
                // Identity so far: the statistics are those of x itself.
                (_, None) => batchnorm::batch_stats(g, x)?,
                (StatsMethod::Exact, Some(k)) => {
                    let y = batchnorm::as_stats(g, |g| g.conv2d(x, k, Padding::Same))?;
                    batchnorm::batch_stats(g, y)?
                }
                (StatsMethod::Estimate, Some(k)) => {
                    (batchnorm::bn_est_mean(g, x, k)?, batchnorm::bn_est_var(g, x, k)?)
                }
            };
            let mu = match st.bias {
                Some(b) => g.add(mu, b)?,
                None => mu,
            };
            if opts.update_running {
                let (m, v) = (g.value(mu).data().to_vec(), g.value(var).data().to_vec());
                batchnorm::update_running(store, bn, &m, &v)?;
            }
            (mu, var)
        }
    };
    // BN(x*K + c) = x*K*s + (c - mu)*s + beta: fold with mean (mu - c).
    let mu_eff = match st.bias {
        Some(b) => g.sub(mu, b)?,
        None => mu,
    };
    let (m, b) = batchnorm::bn_fold(g, kernel, mu_eff, var, binds.var(bn.gamma), binds.var(bn.beta), bn.eps)?;
    st.kernel = Some(m);
    st.bias = Some(b);
    Ok(())
}

/// `x * M + b` with the block's merged weight.
pub fn merged_forward<T: Scalar>(
    block: &ReparamBlock,
    g: &mut Graph<T>,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    x: Var,
    opts: MergeOptions,
) -> Result<Var> {
    let (m, b) = merged_weight(block, g, binds, store, Some(x), opts)?;
    let y = g.conv2d(x, m, Padding::Same)?;
    g.add_channel(y, b)
}

/// Literal branch-by-branch evaluation with ordinary BN layers.
pub fn block_forward_expanded<T: Scalar>(
    block: &ReparamBlock,
    g: &mut Graph<T>,
    binds: &Bindings,
    store: &mut ParamStore<T>,
    x: Var,
    mode: Mode,
    update_running: bool,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for branch in &block.branches {
        let mut y = x;
        for layer in &branch.layers {
            y = match layer {
                Primitive::Identity => y,
                Primitive::Conv { weight } => g.conv2d(y, binds.var(*weight), Padding::Same)?,
                Primitive::Scale { scale } => g.mul_channel(y, binds.var(*scale))?,
                Primitive::Bn(bn) => batchnorm::bn_forward(g, y, bn, binds, store, mode, update_running)?,
            };
        }
        total = Some(match total {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    Ok(total.expect("blocks have at least one branch"))
}

/// Eval-mode merged kernel and bias as plain tensors.
pub fn fold_eval<T: Scalar>(block: &ReparamBlock, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let binds = store.bind(&mut g)?;
    let mut scratch = store.clone();
    let (m, b) = merged_weight(block, &mut g, &binds, &mut scratch, None, MergeOptions::eval())?;
    Ok((g.value(m).clone(), g.value(b).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(7)
    }

    #[test]
    fn identity_kernel_layout() {
        let k = identity_kernel::<f64>(1, (1, 1)).unwrap();
        assert_eq!(k.data(), &[1.0]);
        let k = identity_kernel::<f64>(2, (3, 3)).unwrap();
        assert_eq!(k.shape(), &[3, 3, 2, 2]);
        assert_eq!(k.sum(), 2.0);
        assert_eq!(k.at(&[1, 1, 0, 0]), 1.0);
        assert_eq!(k.at(&[1, 1, 1, 1]), 1.0);
        assert_eq!(k.at(&[1, 1, 0, 1]), 0.0);
        assert_eq!(k.data().iter().filter(|&&v| v == 0.0).count(), 34);
        assert!(identity_kernel::<f64>(0, (3, 3)).is_err());
        assert!(identity_kernel::<f64>(2, (2, 3)).is_err());
    }

    #[test]
    fn even_kernel_rejected_by_parallel_merge() {
        let mut g = Graph::<f64>::new();
        let k = g.constant(Tensor::zeros(vec![2, 2, 1, 1])).unwrap();
        assert!(merge_parallel(&mut g, &[k], (3, 3)).is_err());
    }

    #[test]
    fn two_large_kernels_cannot_chain() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![3, 3, 1, 1])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3, 3, 1, 1])).unwrap();
        assert!(matches!(merge_sequential(&mut g, a, b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn block_validation() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor::zeros(vec![3, 3, 2, 4]));
        let w2 = store.add("w2", ParamKind::Weight, Tensor::zeros(vec![3, 3, 4, 4]));
        let ok = Branch { layers: vec![Primitive::Conv { weight: w }] };
        assert!(ReparamBlock::new(vec![ok.clone()], (3, 3), 2, 4, &store).is_ok());
        assert!(ReparamBlock::new(vec![ok.clone()], (1, 1), 2, 4, &store).is_err());
        assert!(ReparamBlock::new(vec![ok.clone()], (3, 3), 3, 4, &store).is_err());
        let chained = Branch {
            layers: vec![Primitive::Conv { weight: w }, Primitive::Conv { weight: w2 }],
        };
        assert!(matches!(
            ReparamBlock::new(vec![chained], (3, 3), 2, 4, &store),
            Err(Error::Unsupported(_))
        ));
        assert!(ReparamBlock::new(vec![], (3, 3), 2, 4, &store).is_err());
    }

    #[test]
    fn catalogue_builds() {
        for t in Topology::ALL {
            let mut store = ParamStore::<f64>::new();
            let b = ReparamBlock::build(t, 4, 4, 3, Some(BnConfig::default()), &mut store, "blk", &mut rng()).unwrap();
            assert_eq!(b.kernel, (3, 3));
            assert_eq!(Topology::parse(t.name()), Some(t));
        }
        let mut store = ParamStore::<f64>::new();
        assert!(ReparamBlock::build(Topology::ConvIdentity, 2, 4, 3, None, &mut store, "x", &mut rng()).is_err());
        // RepVGG drops the identity branch when channel counts differ.
        let b = ReparamBlock::build(Topology::RepVgg, 2, 4, 3, None, &mut store, "r", &mut rng()).unwrap();
        assert_eq!(b.branches.len(), 2);
    }

    #[test]
    fn train_bn_without_input_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let b = ReparamBlock::build(Topology::ConvBn, 2, 2, 3, Some(BnConfig::default()), &mut store, "b", &mut rng()).unwrap();
        let mut g = Graph::new();
        let binds = store.bind(&mut g).unwrap();
        let r = merged_weight(&b, &mut g, &binds, &mut store, None, MergeOptions::train(StatsMethod::Exact));
        assert!(matches!(r, Err(Error::Invalid(_))));
    }
}
