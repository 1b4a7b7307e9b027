//! Experiment configuration, read from TOML with a strict schema.

use std::fmt;
use std::path::{Path, PathBuf};

use repq::quant::DISABLED_BITS;
use repq::{StatsMethod, Topology};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Whether a stage trains plain convolutions or multi-branch blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageForm {
    Regular,
    Reparametrized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Regular FP training, regular QAT.
    Plain,
    /// Re-parametrized FP training, blocks folded before regular QAT.
    Merged,
    /// Re-parametrized FP training and QAT on the merged weight.
    Repq,
}

impl Strategy {
    pub fn fp_stage(self) -> StageForm {
        match self {
            Strategy::Plain => StageForm::Regular,
            Strategy::Merged | Strategy::Repq => StageForm::Reparametrized,
        }
    }

    pub fn qat_stage(self) -> StageForm {
        match self {
            Strategy::Plain | Strategy::Merged => StageForm::Regular,
            Strategy::Repq => StageForm::Reparametrized,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Merged => "merged",
            Strategy::Repq => "repq",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    ExactFold,
    Estimate,
    None,
}

impl BnMode {
    pub fn name(self) -> &'static str {
        match self {
            BnMode::ExactFold => "exact_fold",
            BnMode::Estimate => "estimate",
            BnMode::None => "none",
        }
    }
}

/// How blocks are evaluated during full-precision training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compute {
    /// Branch by branch with ordinary BN layers.
    #[default]
    Expanded,
    /// A single convolution with the merged weight.
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "minivgg")]
    MiniVgg,
    #[serde(rename = "miniresnet")]
    MiniResNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MiniVgg => "minivgg",
            ModelKind::MiniResNet => "miniresnet",
        }
    }
}

/// Block topology as it appears in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockTopology(pub Topology);

impl TryFrom<String> for BlockTopology {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Topology::parse(&s).map(BlockTopology).ok_or_else(|| {
            let known: Vec<&str> = Topology::ALL.iter().map(|t| t.name()).collect();
            format!("unknown topology `{s}` (expected one of {})", known.join(", "))
        })
    }
}

impl From<BlockTopology> for String {
    fn from(t: BlockTopology) -> String {
        t.0.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_bn_est: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_bn: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub compute: Compute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    pub epochs: usize,
    /// Defaults to a tenth of the FP learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Step-size learning rate as a fraction of the weight learning rate.
    #[serde(default = "default_steps_ratio")]
    pub steps_lr_ratio: f64,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_wd() -> f64 {
    5e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_steps_ratio() -> f64 {
    0.1
}
fn default_bn_momentum() -> f64 {
    repq::batchnorm::DEFAULT_MOMENTUM
}
fn default_bn_eps() -> f64 {
    repq::batchnorm::DEFAULT_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: Strategy,
    pub bn_mode: BnMode,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Layers counted from the end that keep exact BN statistics.
    #[serde(default)]
    pub keep_bn_last: usize,
    #[serde(default, rename = "layer", skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerOverride>,
    pub fp: FpConfig,
    pub qat: QatConfig,
}

impl StrategyConfig {
    pub fn qat_lr(&self) -> f64 {
        self.qat.lr.unwrap_or(self.fp.lr * 0.1)
    }

    fn layer_override(&self, layer: usize) -> Option<&LayerOverride> {
        self.layers.iter().find(|o| o.layer == layer)
    }

    /// Statistics used when a layer's BN is folded during training.
    pub fn stats_for(&self, layer: usize, num_layers: usize) -> StatsMethod {
        let o = self.layer_override(layer);
        let keep = o.and_then(|o| o.keep_bn).unwrap_or(false) || layer + self.keep_bn_last >= num_layers;
        let est = o.and_then(|o| o.use_bn_est).unwrap_or(self.bn_mode == BnMode::Estimate);
        if est && !keep {
            StatsMethod::Estimate
        } else {
            StatsMethod::Exact
        }
    }

    pub fn has_bn(&self) -> bool {
        self.bn_mode != BnMode::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Ten classes of 16x16 single-channel shapes and textures.
    Synthetic {
        train_size: usize,
        eval_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Two linearly separable classes.
    Separable {
        train_size: usize,
        eval_size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `images.bin` (raw u8 NHWC) and `labels.txt` (one class per line).
    Folder {
        path: PathBuf,
        height: usize,
        width: usize,
        channels: usize,
        eval_fraction: f64,
    },
}

fn default_noise() -> f64 {
    0.2
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64, 64]
}

fn default_pools() -> Vec<usize> {
    vec![1, 2]
}

fn default_edge_bits() -> u32 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Layers followed by 2x2 average pooling.
    #[serde(default = "default_pools")]
    pub pools: Vec<usize>,
    /// One topology for every layer, or one per layer.
    pub topology: Vec<BlockTopology>,
    /// QAT bit-width; 32 disables quantization.
    pub bits: u32,
    #[serde(default = "default_edge_bits")]
    pub first_bits: u32,
    #[serde(default = "default_edge_bits")]
    pub head_bits: u32,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub strategy: StrategyConfig,
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "REPQ_OUTPUT_DIR";

fn valid_bits(b: u32) -> bool {
    (2..=16).contains(&b) || b == DISABLED_BITS
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn topology_for(&self, layer: usize) -> Topology {
        if self.topology.len() == 1 {
            self.topology[0].0
        } else {
            self.topology[layer].0
        }
    }

    /// QAT bit-width of layer `layer`.
    pub fn bits_for(&self, layer: usize) -> u32 {
        if let Some(b) = self.strategy.layer_override(layer).and_then(|o| o.bits) {
            return b;
        }
        if layer == 0 && self.bits != DISABLED_BITS {
            return self.first_bits;
        }
        self.bits
    }

    pub fn head_bits(&self) -> u32 {
        if self.bits == DISABLED_BITS {
            DISABLED_BITS
        } else {
            self.head_bits
        }
    }

    pub fn input_channels(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic { .. } | DatasetSpec::Separable { .. } => 1,
            DatasetSpec::Folder { channels, .. } => *channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        let n = self.widths.len();
        if n == 0 || self.widths.contains(&0) {
            return err("`widths` must list at least one positive width".into());
        }
        if self.topology.len() != 1 && self.topology.len() != n {
            return err(format!("`topology` needs 1 or {n} entries, got {}", self.topology.len()));
        }
        if let Some(&p) = self.pools.iter().find(|&&p| p >= n) {
            return err(format!("pool after layer {p}, but there are {n} layers"));
        }
        for (name, b) in [("bits", self.bits), ("first_bits", self.first_bits), ("head_bits", self.head_bits)] {
            if !valid_bits(b) {
                return err(format!("`{name}` = {b}: expected 2..=16 or {DISABLED_BITS}"));
            }
        }
        for o in &self.strategy.layers {
            if o.layer >= n {
                return err(format!("override for layer {}, but there are {n} layers", o.layer));
            }
            if let Some(b) = o.bits.filter(|&b| !valid_bits(b)) {
                return err(format!("layer {} bits = {b}: expected 2..=16 or {DISABLED_BITS}", o.layer));
            }
        }
        if self.seeds.is_empty() {
            return err("`seeds` is empty".into());
        }
        let s = &self.strategy;
        if s.fp.batch_size == 0 {
            return err("`fp.batch_size` must be positive".into());
        }
        if !(s.fp.lr > 0.0) || s.qat.lr.is_some_and(|lr| !(lr > 0.0)) {
            return err("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&s.fp.momentum) || s.fp.weight_decay < 0.0 || s.qat.steps_lr_ratio < 0.0 {
            return err("momentum must lie in [0, 1) and weight decay / step ratio must be nonnegative".into());
        }
        if !(s.bn_momentum > 0.0 && s.bn_momentum <= 1.0 && s.bn_eps > 0.0) {
            return err("`bn_momentum` must lie in (0, 1] and `bn_eps` must be positive".into());
        }
        let mut channels = self.input_channels();
        for (i, &w) in self.widths.iter().enumerate() {
            let t = self.topology_for(i);
            if t == Topology::ConvIdentity && channels != w {
                return err(format!("layer {i}: conv_identity needs equal in/out channels ({channels} vs {w})"));
            }
            channels = w;
        }
        if let DatasetSpec::Folder { eval_fraction, .. } = &self.dataset {
            if !(0.0..1.0).contains(eval_fraction) {
                return err("`eval_fraction` must lie in [0, 1)".into());
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
