//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so node order is
//! a topological order and `backward` is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that multiply counts are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    /// Ordinary forward computation.
    Compute,
    /// Forward work spent on normalization statistics.
    Stats,
}

/// Multiply counts accumulated by a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MultCounts {
    pub compute: u64,
    pub stats: u64,
    pub backward: u64,
}

impl MultCounts {
    pub fn forward(&self) -> u64 {
        self.compute + self.stats
    }

    pub fn total(&self) -> u64 {
        self.compute + self.stats + self.backward
    }

    pub fn since(&self, earlier: &MultCounts) -> MultCounts {
        MultCounts {
            compute: self.compute - earlier.compute,
            stats: self.stats - earlier.stats,
            backward: self.backward - earlier.backward,
        }
    }
}

/// Integer clamp range and LSQ gradient scale for [`Graph::quantize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub qmin: f64,
    pub qmax: f64,
    pub grad_scale: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Relu(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SumAll(Var),
    ReduceLeading { x: Var, mean: bool },
    VarLeading(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    PadKernel { w: Var, top: usize, left: usize },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Quantize { v: Var, step: Var, params: QuantParams },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    cost_kind: CostKind,
    counts: MultCounts,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            cost_kind: CostKind::Compute,
            counts: MultCounts::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counts(&self) -> MultCounts {
        self.counts
    }

    /// Charge subsequent forward multiplies to `kind`; returns the previous kind.
    pub fn set_cost_kind(&mut self, kind: CostKind) -> CostKind {
        std::mem::replace(&mut self.cost_kind, kind)
    }

    fn charge(&mut self, n: u64) {
        match self.cost_kind {
            CostKind::Compute => self.counts.compute += n,
            CostKind::Stats => self.counts.stats += n,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, requires_grad: bool) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` populates its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The leaf's value with its `grad` field filled in.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.value(v).clone();
        t.grad = self.grad(v).map(|g| g.to_vec());
        t
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.charge(out.numel() as u64);
        self.push("mul", out, Op::Mul(a, b), self.rg(&[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        self.charge(out.numel() as u64);
        self.push("div", out, Op::Div(a, b), self.rg(&[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), self.rg(&[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(a).map(|x| x * k);
        self.charge(out.numel() as u64);
        self.push("scale", out, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.charge(out.numel() as u64);
        self.push("square", out, Op::Square(a), self.rg(&[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < T::zero()) {
            return Err(Error::Invalid("sqrt of a negative value".into()));
        }
        let out = self.value(a).map(|x| x.sqrt());
        self.charge(out.numel() as u64);
        self.push("sqrt", out, Op::Sqrt(a), self.rg(&[a]))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| T::one() / x);
        self.charge(out.numel() as u64);
        self.push("recip", out, Op::Recip(a), self.rg(&[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), self.rg(&[a]))
    }

    fn check_channel(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let c = self.value(x).channels();
        if self.shape(v) != [c] {
            return shape_err(op, format!("vector {:?} against trailing dim {}", self.shape(v), c));
        }
        Ok(c)
    }

    /// `x + v` with `v: [C]` broadcast over the trailing dimension.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.check_channel("add_channel", x, v)?;
        let vv = self.value(v).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &a)| a + vv[i % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_channel", out, Op::AddChannel(x, v), self.rg(&[x, v]))
    }

    /// `x * v` with `v: [C]` broadcast over the trailing dimension.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.check_channel("mul_channel", x, v)?;
        let vv = self.value(v).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &a)| a * vv[i % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.charge(out.numel() as u64);
        self.push("mul_channel", out, Op::MulChannel(x, v), self.rg(&[x, v]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.charge((m * k * n) as u64);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, Op::MatMul { a, b, m, k, n }, self.rg(&[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), self.rg(&[x]))
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len()));
        }
        let out = permute_tensor(self.value(x), perm);
        self.push("permute", out, Op::Permute { x, perm: perm.to_vec() }, self.rg(&[x]))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), self.rg(&[x]))
    }

    fn reduce_leading(&mut self, x: Var, keep: usize, mean: bool, op: &'static str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() <= keep {
            return shape_err(op, format!("cannot keep {} trailing dims of {:?}", keep, shape));
        }
        let out_shape = shape[shape.len() - keep..].to_vec();
        let inner: usize = out_shape.iter().product();
        let rows = self.value(x).numel() / inner.max(1);
        let mut acc = vec![T::zero(); inner];
        for row in self.value(x).data().chunks(inner) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        if mean {
            let inv = T::one() / T::of(rows as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
            self.charge(inner as u64);
        }
        let out = Tensor::new(out_shape, acc)?;
        self.push(op, out, Op::ReduceLeading { x, mean }, self.rg(&[x]))
    }

    /// Per-channel mean over every leading dimension (batch, height, width
    /// for NHWC activations); output shape `[C]`.
    pub fn mean_bhd(&mut self, x: Var) -> Result<Var> {
        self.reduce_leading(x, 1, true, "mean_bhd")
    }

    /// Per-channel population variance (1/N) over every leading dimension.
    pub fn var_bhd(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return shape_err("var_bhd", format!("rank {} input", xv.rank()));
        }
        let c = xv.channels();
        let rows = xv.numel() / c;
        let mean = channel_mean(xv.data(), c);
        let mut acc = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for ((a, &v), &m) in acc.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *a += d * d;
            }
        }
        let inv = T::one() / T::of(rows as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        self.charge((xv.numel() + 2 * c) as u64);
        let out = Tensor::new(vec![c], acc)?;
        self.push("var_bhd", out, Op::VarLeading(x), self.rg(&[x]))
    }

    /// Sum of a `[Kh, Kw, IN, OUT]` kernel over its spatial taps: `[IN, OUT]`.
    pub fn sum_spatial(&mut self, w: Var) -> Result<Var> {
        if self.shape(w).len() != 4 {
            return shape_err("sum_spatial", format!("expected a rank-4 kernel, got {:?}", self.shape(w)));
        }
        self.reduce_leading(w, 2, false, "sum_spatial")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let Some(geom) = ConvGeometry::new(&sx, &sw, padding) else {
            return shape_err("conv2d", format!("input {:?} with kernel {:?} ({:?} padding)", sx, sw, padding));
        };
        if padding == Padding::Same && (sw[0] % 2 == 0 || sw[1] % 2 == 0) {
            return Err(Error::Unsupported("same padding needs odd kernel sizes".into()));
        }
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        self.charge(geom.multiplies());
        let out = Tensor::new(geom.out_shape().to_vec(), data)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, self.rg(&[x, w]))
    }

    /// Zero-pad a `[kh, kw, IN, OUT]` kernel to `[target_h, target_w, IN, OUT]`
    /// with the original centered. Both sizes must be odd.
    pub fn pad_kernel(&mut self, w: Var, target: (usize, usize)) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 4 {
            return shape_err("pad_kernel", format!("expected a rank-4 kernel, got {:?}", s));
        }
        let (kh, kw) = (s[0], s[1]);
        if kh % 2 == 0 || kw % 2 == 0 || target.0 % 2 == 0 || target.1 % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel {}x{} -> {}x{}: centering needs odd sizes",
                kh, kw, target.0, target.1
            )));
        }
        if kh > target.0 || kw > target.1 {
            return shape_err("pad_kernel", format!("{}x{} does not fit in {}x{}", kh, kw, target.0, target.1));
        }
        let (top, left) = ((target.0 - kh) / 2, (target.1 - kw) / 2);
        let inner = s[2] * s[3];
        let src = self.value(w).data();
        let mut out = vec![T::zero(); target.0 * target.1 * inner];
        for i in 0..kh {
            for j in 0..kw {
                let from = (i * kw + j) * inner;
                let to = ((i + top) * target.1 + j + left) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let out = Tensor::new(vec![target.0, target.1, s[2], s[3]], out)?;
        self.push("pad_kernel", out, Op::PadKernel { w, top, left }, self.rg(&[w]))
    }

    /// 2x2 average pooling with stride 2 over NHWC input.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return shape_err("avg_pool2", format!("needs rank 4 with even spatial dims, got {:?}", s));
        }
        let (b, h, d, c) = (s[0], s[1], s[2], s[3]);
        let (oh, od) = (h / 2, d / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); b * oh * od * c];
        for n in 0..b {
            for i in 0..oh {
                for j in 0..od {
                    let dst = ((n * oh + i) * od + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let from = ((n * h + 2 * i + di) * d + 2 * j + dj) * c;
                        for k in 0..c {
                            out[dst + k] += src[from + k];
                        }
                    }
                    for k in 0..c {
                        out[dst + k] *= quarter;
                    }
                }
            }
        }
        self.charge((b * oh * od * c) as u64);
        let out = Tensor::new(vec![b, oh, od, c], out)?;
        self.push("avg_pool2", out, Op::AvgPool2(x), self.rg(&[x]))
    }

    /// Mean over height and width: `[B, H, D, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("expected rank 4, got {:?}", s));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let src = self.value(x).data();
        let inv = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); b * c];
        for n in 0..b {
            let acc = &mut out[n * c..(n + 1) * c];
            for p in 0..hw {
                let px = &src[(n * hw + p) * c..][..c];
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        self.charge((b * c) as u64);
        let out = Tensor::new(vec![b, c], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), self.rg(&[x]))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err("softmax_cross_entropy", format!("logits {:?} for {} labels", s, labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {} out of range for {} classes", bad, k)));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f64; z.len()];
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let denom: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v.as_f64() - mx).exp() / denom;
            }
            loss -= (row[label].as_f64() - mx) - denom.ln();
        }
        loss /= labels.len().max(1) as f64;
        self.charge(z.len() as u64);
        let out = Tensor::scalar(T::of(loss));
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("softmax_cross_entropy", out, op, self.rg(&[logits]))
    }

    /// LSQ pseudo-quantization `clamp(round(v/s), qmin, qmax) * s`.
    ///
    /// `step` is either `[1]` (one step for the whole tensor) or `[C]` with
    /// one step per trailing-dimension channel. Ties round to even.
    /// Backward is straight-through inside the clamp range; the step
    /// gradient is the LSQ rule scaled by `params.grad_scale`.
    pub fn quantize(&mut self, v: Var, step: Var, params: QuantParams) -> Result<Var> {
        let c = self.value(v).channels();
        let sstep = self.shape(step).to_vec();
        if sstep != [1] && sstep != [c] {
            return shape_err("quantize", format!("step {:?} for trailing dim {}", sstep, c));
        }
        let steps = self.value(step).data().to_vec();
        if steps.iter().any(|&s| s <= T::zero()) {
            return Err(Error::Invalid("quantizer step must be positive".into()));
        }
        let (qmin, qmax) = (T::of(params.qmin), T::of(params.qmax));
        let per_channel = steps.len() > 1 || c == 1;
        let vv = self.value(v);
        let data = vv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let s = if per_channel { steps[i % c] } else { steps[0] };
                (x / s).round_even().max(qmin).min(qmax) * s
            })
            .collect();
        let out = Tensor::new(vv.shape().to_vec(), data)?;
        self.charge(2 * out.numel() as u64);
        self.push("quantize", out, Op::Quantize { v, step, params }, self.rg(&[v, step]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves
    /// only and replace those of any earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut mults = 0u64;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            for (target, g) in self.vjp(idx, &gy, &mut mults) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.counts.backward += mults;
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn vjp(&self, idx: usize, gy: &[T], mults: &mut u64) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|&g| -g).collect()));
            }
            Op::Mul(a, b) => {
                *mults += 2 * gy.len() as u64;
                out.push((*a, gy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()));
                out.push((*b, gy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()));
            }
            Op::Div(a, b) => {
                *mults += 3 * gy.len() as u64;
                let (xa, xb) = (val(*a), val(*b));
                out.push((*a, gy.iter().zip(xb).map(|(&g, &y)| g / y).collect()));
                out.push((
                    *b,
                    gy.iter().zip(xa).zip(xb).map(|((&g, &x), &y)| -g * x / (y * y)).collect(),
                ));
            }
            Op::AddScalar(a) => out.push((*a, gy.to_vec())),
            Op::Scale(a, c) => {
                *mults += gy.len() as u64;
                let k = T::of(*c);
                out.push((*a, gy.iter().map(|&g| g * k).collect()));
            }
            Op::Square(a) => {
                *mults += 2 * gy.len() as u64;
                let two = T::of(2.0);
                out.push((*a, gy.iter().zip(val(*a)).map(|(&g, &x)| two * g * x).collect()));
            }
            Op::Sqrt(a) => {
                *mults += gy.len() as u64;
                let half = T::of(0.5);
                out.push((*a, gy.iter().zip(node.value.data()).map(|(&g, &y)| g * half / y).collect()));
            }
            Op::Recip(a) => {
                *mults += 2 * gy.len() as u64;
                out.push((*a, gy.iter().zip(node.value.data()).map(|(&g, &y)| -g * y * y).collect()));
            }
            Op::Relu(a) => {
                out.push((
                    *a,
                    gy.iter()
                        .zip(val(*a))
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::AddChannel(x, v) => {
                let c = self.value(*v).numel();
                if self.needs(*x) {
                    out.push((*x, gy.to_vec()));
                }
                if self.needs(*v) {
                    out.push((*v, channel_sum(gy, c)));
                }
            }
            Op::MulChannel(x, v) => {
                let c = self.value(*v).numel();
                let vv = val(*v);
                if self.needs(*x) {
                    *mults += gy.len() as u64;
                    out.push((*x, gy.iter().enumerate().map(|(i, &g)| g * vv[i % c]).collect()));
                }
                if self.needs(*v) {
                    *mults += gy.len() as u64;
                    let mut acc = vec![T::zero(); c];
                    for (i, (&g, &xv)) in gy.iter().zip(val(*x)).enumerate() {
                        acc[i % c] += g * xv;
                    }
                    out.push((*v, acc));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    *mults += (m * k * n) as u64;
                    out.push((*a, kernels::matmul_nt(gy, val(*b), *m, *n, *k)));
                }
                if self.needs(*b) {
                    *mults += (m * k * n) as u64;
                    out.push((*b, kernels::matmul_tn(val(*a), gy, *m, *k, *n)));
                }
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), gy.to_vec()).expect("grad shape");
                out.push((*x, permute_tensor(&gt, &inverse).into_data()));
            }
            Op::SumAll(x) => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::ReduceLeading { x, mean } => {
                let n = self.value(*x).numel();
                let inner = gy.len();
                let scale = if *mean {
                    T::one() / T::of((n / inner) as f64)
                } else {
                    T::one()
                };
                *mults += if *mean { inner as u64 } else { 0 };
                let g: Vec<T> = gy.iter().map(|&g| g * scale).collect();
                out.push((*x, (0..n).map(|i| g[i % inner]).collect()));
            }
            Op::VarLeading(x) => {
                let xv = val(*x);
                let c = gy.len();
                let rows = xv.len() / c;
                let mean = channel_mean(xv, c);
                let k = T::of(2.0 / rows as f64);
                *mults += 2 * xv.len() as u64;
                out.push((
                    *x,
                    xv.iter().enumerate().map(|(i, &v)| gy[i % c] * k * (v - mean[i % c])).collect(),
                ));
            }
            Op::Conv2d { x, w, geom } => {
                if self.needs(*x) {
                    *mults += geom.multiplies();
                    out.push((*x, kernels::conv2d_backward_input(gy, val(*w), geom)));
                }
                if self.needs(*w) {
                    *mults += geom.multiplies();
                    out.push((*w, kernels::conv2d_backward_weight(val(*x), gy, geom)));
                }
            }
            Op::PadKernel { w, top, left } => {
                let s = self.shape(*w);
                let (kh, kw, inner) = (s[0], s[1], s[2] * s[3]);
                let tw = node.value.shape()[1];
                let mut g = vec![T::zero(); kh * kw * inner];
                for i in 0..kh {
                    for j in 0..kw {
                        let from = ((i + top) * tw + j + left) * inner;
                        g[(i * kw + j) * inner..][..inner].copy_from_slice(&gy[from..from + inner]);
                    }
                }
                out.push((*w, g));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (b, h, d, c) = (s[0], s[1], s[2], s[3]);
                let (oh, od) = (h / 2, d / 2);
                let quarter = T::of(0.25);
                let mut g = vec![T::zero(); b * h * d * c];
                for n in 0..b {
                    for i in 0..h {
                        for j in 0..d {
                            let src = ((n * oh + i / 2) * od + j / 2) * c;
                            let dst = ((n * h + i) * d + j) * c;
                            for k in 0..c {
                                g[dst + k] = gy[src + k] * quarter;
                            }
                        }
                    }
                }
                *mults += g.len() as u64;
                out.push((*x, g));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::one() / T::of(hw as f64);
                let mut g = vec![T::zero(); b * hw * c];
                for n in 0..b {
                    for p in 0..hw {
                        for k in 0..c {
                            g[(n * hw + p) * c + k] = gy[n * c + k] * inv;
                        }
                    }
                }
                *mults += g.len() as u64;
                out.push((*x, g));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len().max(1);
                let scale = gy[0].as_f64() / labels.len() as f64;
                let mut g: Vec<T> = probs.iter().map(|&p| T::of(p * scale)).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] -= T::of(scale);
                }
                *mults += g.len() as u64;
                out.push((*logits, g));
            }
            Op::Quantize { v, step, params } => {
                let vv = val(*v);
                let steps = val(*step);
                let c = self.value(*v).channels();
                let per_channel = steps.len() > 1 || c == 1;
                let (qmin, qmax) = (T::of(params.qmin), T::of(params.qmax));
                let mut gv = vec![T::zero(); vv.len()];
                let mut gs = vec![T::zero(); steps.len()];
                for (i, (&x, &g)) in vv.iter().zip(gy).enumerate() {
                    let si = if per_channel { i % c } else { 0 };
                    let s = steps[si];
                    let r = x / s;
                    let d = if r < qmin {
                        qmin
                    } else if r > qmax {
                        qmax
                    } else {
                        gv[i] = g;
                        r.round_even() - r
                    };
                    gs[si] += g * d;
                }
                let gscale = T::of(params.grad_scale);
                gs.iter_mut().for_each(|s| *s *= gscale);
                *mults += 2 * vv.len() as u64;
                if self.needs(*v) {
                    out.push((*v, gv));
                }
                if self.needs(*step) {
                    out.push((*step, gs));
                }
            }
        }
        out
    }
}

fn channel_mean<T: Scalar>(data: &[T], c: usize) -> Vec<T> {
    let rows = data.len() / c;
    let mut mean = channel_sum(data, c);
    let inv = T::one() / T::of(rows as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

fn channel_sum<T: Scalar>(data: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for row in data.chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src_shape = x.shape();
    let rank = src_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let mut src_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        src_strides[k] = src_strides[k + 1] * src_shape[k + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(x.numel());
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(x.data()[off]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permuted shape")
}
