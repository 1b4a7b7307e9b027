//! MiniVGG and MiniResNet built from re-parametrizable layers.

use rand::Rng;
use repq::batchnorm::{self, Mode, StatsMethod};
use repq::quant::DISABLED_BITS;
use repq::reparam::{self, BnConfig, MergeOptions, Primitive, ReparamBlock, Topology};
use repq::{
    Bindings, Error, Granularity, Graph, MultCounts, Padding, ParamId, ParamKind, ParamStore, QuantRange, Quantizer,
    Scalar, Tensor, Var,
};

use crate::config::{ExperimentConfig, ModelKind, StageForm};
use crate::error::Result;

/// Kernel size of every layer.
pub const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub enum Form {
    Block { block: ReparamBlock, topology: Topology },
    /// A single convolution with bias, produced by folding a block.
    Folded { weight: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: bool,
    pub form: Form,
    pub stats: StatsMethod,
    pub act_q: Option<Quantizer>,
    pub weight_q: Option<Quantizer>,
}

/// How blocks are evaluated in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Expanded,
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    pub path: Path,
    pub update_running: bool,
    /// Initialize quantizers from the values they first see.
    pub calibrate: bool,
}

impl Pass {
    pub fn train(path: Path) -> Self {
        Pass {
            mode: Mode::Train,
            path,
            update_running: true,
            calibrate: false,
        }
    }

    pub fn eval(path: Path) -> Self {
        Pass {
            mode: Mode::Eval,
            path,
            update_running: false,
            calibrate: false,
        }
    }
}

pub struct Output {
    pub logits: Var,
    /// Multiplies charged by each layer (conv, activation, pooling, skip).
    pub layer_counts: Vec<MultCounts>,
}

/// Layer shapes and block choices shared by every stage of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub pools: Vec<usize>,
    pub topologies: Vec<Topology>,
    pub bn: Option<BnConfig>,
    pub stats: Vec<StatsMethod>,
}

impl Architecture {
    pub fn from_config(cfg: &ExperimentConfig, classes: usize) -> Self {
        let n = cfg.num_layers();
        let s = &cfg.strategy;
        Architecture {
            kind: cfg.model,
            in_channels: cfg.input_channels(),
            classes,
            widths: cfg.widths.clone(),
            pools: cfg.pools.clone(),
            topologies: (0..n).map(|i| cfg.topology_for(i)).collect(),
            bn: s.has_bn().then_some(BnConfig {
                momentum: s.bn_momentum,
                eps: s.bn_eps,
            }),
            stats: (0..n).map(|i| s.stats_for(i, n)).collect(),
        }
    }

    /// Topology of layer `i` in a stage of the given form.
    pub fn topology(&self, i: usize, form: StageForm) -> Topology {
        match (form, self.bn.is_some()) {
            (StageForm::Reparametrized, _) => self.topologies[i],
            (StageForm::Regular, true) => Topology::ConvBn,
            (StageForm::Regular, false) => Topology::Plain,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub head_act_q: Option<Quantizer>,
    pub head_weight_q: Option<Quantizer>,
    pub store: ParamStore<T>,
    pub classes: usize,
}

fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

impl<T: Scalar> Model<T> {
    pub fn build<R: Rng + ?Sized>(arch: &Architecture, form: StageForm, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(arch.widths.len());
        let mut cin = arch.in_channels;
        for (i, &cout) in arch.widths.iter().enumerate() {
            let topology = arch.topology(i, form);
            let block = ReparamBlock::build(topology, cin, cout, KERNEL, arch.bn, &mut store, &layer_name(i), rng)?;
            layers.push(Layer {
                in_channels: cin,
                out_channels: cout,
                pool: arch.pools.contains(&i),
                form: Form::Block { block, topology },
                stats: arch.stats[i],
                act_q: None,
                weight_q: None,
            });
            cin = cout;
        }
        let std = (1.0 / cin as f64).sqrt();
        let head_weight = store.add("head.weight", ParamKind::Weight, Tensor::randn(vec![cin, arch.classes], std, rng));
        let head_bias = store.add("head.bias", ParamKind::Affine, Tensor::zeros(vec![arch.classes]));
        Ok(Model {
            kind: arch.kind,
            layers,
            head_weight,
            head_bias,
            head_act_q: None,
            head_weight_q: None,
            store,
            classes: arch.classes,
        })
    }

    /// Structure signature stored in checkpoints, e.g. `minivgg:repvgg+bn,...`.
    pub fn layout(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match &l.form {
                Form::Block { block, topology } => {
                    format!("{}{}", topology.name(), if block.has_bn() { "+bn" } else { "" })
                }
                Form::Folded { .. } => "folded".to_string(),
            })
            .collect();
        format!("{}:{}", self.kind.name(), layers.join(","))
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.act_q.is_some() || l.weight_q.is_some()) || self.head_weight_q.is_some()
    }

    /// Replace every block with its eval-mode fold: one conv plus bias.
    pub fn fold_blocks(&self) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = match &l.form {
                Form::Block { block, .. } => reparam::fold_eval(block, &self.store)?,
                Form::Folded { weight, bias } => (self.store.get(*weight).clone(), self.store.get(*bias).clone()),
            };
            let weight = store.add(format!("{}.weight", layer_name(i)), ParamKind::Weight, w);
            let bias = store.add(format!("{}.bias", layer_name(i)), ParamKind::Affine, b);
            layers.push(Layer {
                form: Form::Folded { weight, bias },
                act_q: None,
                weight_q: None,
                ..l.clone()
            });
        }
        let head_weight = store.add("head.weight", ParamKind::Weight, self.store.get(self.head_weight).clone());
        let head_bias = store.add("head.bias", ParamKind::Affine, self.store.get(self.head_bias).clone());
        Ok(Model {
            kind: self.kind,
            layers,
            head_weight,
            head_bias,
            head_act_q: None,
            head_weight_q: None,
            store,
            classes: self.classes,
        })
    }

    /// Register quantizers: unsigned per-tensor steps on layer inputs
    /// (images in `[0, 1]` or ReLU outputs), signed per-output-channel steps
    /// on weights. Layers at [`DISABLED_BITS`] stay full precision.
    pub fn attach_quantizers(&mut self, layer_bits: impl Fn(usize) -> u32, head_bits: u32) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let bits = layer_bits(i);
            if bits == DISABLED_BITS {
                continue;
            }
            let name = layer_name(i);
            l.act_q = Some(Quantizer::register(
                &mut self.store,
                &format!("{name}.act"),
                QuantRange::new(bits, false)?,
                Granularity::PerTensor,
                1,
            ));
            l.weight_q = Some(Quantizer::register(
                &mut self.store,
                &format!("{name}.wq"),
                QuantRange::new(bits, true)?,
                Granularity::PerChannel,
                l.out_channels,
            ));
        }
        if head_bits != DISABLED_BITS {
            self.head_act_q = Some(Quantizer::register(
                &mut self.store,
                "head.act",
                QuantRange::new(head_bits, false)?,
                Granularity::PerTensor,
                1,
            ));
            self.head_weight_q = Some(Quantizer::register(
                &mut self.store,
                "head.wq",
                QuantRange::new(head_bits, true)?,
                Granularity::PerChannel,
                self.classes,
            ));
        }
        Ok(())
    }

    /// Mark every attached quantizer as initialized (steps loaded from a checkpoint).
    pub fn mark_quantizers_initialized(&mut self) {
        let all = self
            .layers
            .iter_mut()
            .flat_map(|l| [l.act_q.as_mut(), l.weight_q.as_mut()])
            .chain([self.head_act_q.as_mut(), self.head_weight_q.as_mut()]);
        for q in all.flatten() {
            q.initialized = true;
        }
    }

    pub fn quantizers_initialized(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| [l.act_q.as_ref(), l.weight_q.as_ref()])
            .chain([self.head_act_q.as_ref(), self.head_weight_q.as_ref()])
            .flatten()
            .all(|q| q.initialized)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, binds: &Bindings, x: Var, pass: Pass) -> Result<Output> {
        let Model {
            kind,
            layers,
            head_weight,
            head_bias,
            head_act_q,
            head_weight_q,
            store,
            ..
        } = self;
        let mut h = x;
        let mut layer_counts = Vec::with_capacity(layers.len());
        for layer in layers.iter_mut() {
            let before = g.counts();
            let mut y = layer_forward(layer, store, g, binds, h, pass)?;
            if *kind == ModelKind::MiniResNet {
                let skip = skip_projection(g, h, layer.in_channels, layer.out_channels)?;
                y = g.add(y, skip)?;
            }
            y = g.relu(y)?;
            if layer.pool {
                y = g.avg_pool2(y)?;
            }
            layer_counts.push(g.counts().since(&before));
            h = y;
        }
        let pooled = g.global_avg_pool(h)?;
        let pooled = quantize(head_act_q.as_mut(), store, g, binds, pooled, pass.calibrate)?;
        let w = quantize(head_weight_q.as_mut(), store, g, binds, binds.var(*head_weight), pass.calibrate)?;
        let logits = g.matmul(pooled, w)?;
        let logits = g.add_channel(logits, binds.var(*head_bias))?;
        Ok(Output { logits, layer_counts })
    }
}

/// `Q(v)`, or `v` itself without a quantizer. While calibrating, an
/// uninitialized quantizer is set up from `v` first and its fresh step is
/// used as a constant (the bound step still holds the old value).
fn quantize<T: Scalar>(
    q: Option<&mut Quantizer>,
    store: &mut ParamStore<T>,
    g: &mut Graph<T>,
    binds: &Bindings,
    v: Var,
    calibrate: bool,
) -> Result<Var> {
    let Some(q) = q else { return Ok(v) };
    if calibrate && !q.initialized {
        let value = g.value(v).clone();
        q.init_min_error(store, &value)?;
        let step = g.constant(store.get(q.step).clone())?;
        let n = q.values_per_step(value.shape());
        return Ok(g.quantize(v, step, q.range.params(n))?);
    }
    Ok(q.apply(g, binds, v)?)
}

fn layer_forward<T: Scalar>(
    layer: &mut Layer,
    store: &mut ParamStore<T>,
    g: &mut Graph<T>,
    binds: &Bindings,
    x: Var,
    pass: Pass,
) -> Result<Var> {
    let quantized = layer.act_q.is_some() || layer.weight_q.is_some();
    let xq = quantize(layer.act_q.as_mut(), store, g, binds, x, pass.calibrate)?;
    match &layer.form {
        Form::Folded { weight, bias } => {
            let w = quantize(layer.weight_q.as_mut(), store, g, binds, binds.var(*weight), pass.calibrate)?;
            let y = g.conv2d(xq, w, Padding::Same)?;
            Ok(g.add_channel(y, binds.var(*bias))?)
        }
        Form::Block { block, .. } => match pass.path {
            Path::Expanded if !quantized => Ok(reparam::block_forward_expanded(
                block,
                g,
                binds,
                store,
                x,
                pass.mode,
                pass.update_running,
            )?),
            Path::Expanded => {
                // Regular QAT: Q(x) * Q(W), then the layer's own BN.
                let [branch] = block.branches.as_slice() else {
                    return Err(Error::Unsupported("quantized expanded path needs a single-branch block".into()).into());
                };
                let mut y = xq;
                let mut convs = 0;
                for p in &branch.layers {
                    y = match p {
                        Primitive::Conv { weight } => {
                            convs += 1;
                            if convs > 1 {
                                return Err(Error::Unsupported("quantized expanded path needs a single conv".into()).into());
                            }
                            let w = quantize(layer.weight_q.as_mut(), store, g, binds, binds.var(*weight), pass.calibrate)?;
                            g.conv2d(y, w, Padding::Same)?
                        }
                        Primitive::Bn(bn) => batchnorm::bn_forward(g, y, bn, binds, store, pass.mode, pass.update_running)?,
                        Primitive::Scale { scale } => g.mul_channel(y, binds.var(*scale))?,
                        Primitive::Identity => y,
                    };
                }
                Ok(y)
            }
            Path::Merged => {
                // Statistics come from the unquantized input; only the final
                // convolution sees quantized operands.
                let opts = MergeOptions {
                    mode: pass.mode,
                    stats: layer.stats,
                    update_running: pass.update_running,
                };
                let (m, b) = reparam::merged_weight(block, g, binds, store, Some(x), opts)?;
                let mq = quantize(layer.weight_q.as_mut(), store, g, binds, m, pass.calibrate)?;
                let y = g.conv2d(xq, mq, Padding::Same)?;
                Ok(g.add_channel(y, b)?)
            }
        },
    }
}

/// Identity skip, zero-padded in channels when the layer widens.
fn skip_projection<T: Scalar>(g: &mut Graph<T>, x: Var, cin: usize, cout: usize) -> Result<Var> {
    if cin == cout {
        return Ok(x);
    }
    if cout < cin {
        return Err(Error::Unsupported(format!("skip from {cin} to {cout} channels")).into());
    }
    let shape = g.shape(x).to_vec();
    let rows = shape[..3].iter().product();
    let p = Tensor::from_fn(vec![cin, cout], |k| if k / cout == k % cout { T::one() } else { T::zero() });
    let p = g.constant(p)?;
    let flat = g.reshape(x, &[rows, cin])?;
    let y = g.matmul(flat, p)?;
    Ok(g.reshape(y, &[shape[0], shape[1], shape[2], cout])?)
}
