//! Multiply counts of one RepQ training step with exact BN folding versus
//! estimated statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repq::batchnorm::{self, StatsMethod};
use repq::{Graph, Padding, Tensor};
use serde::Serialize;

use crate::config::{BnMode, ExperimentConfig, StageForm, Strategy};
use crate::data::{self, Dataset};
use crate::error::Result;
use crate::metrics::Counters;
use crate::model::{Architecture, Model, Pass, Path};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Forward multiplies of the layer with exact statistics.
    pub exact: Counters,
    /// Forward multiplies of the layer with estimated statistics.
    pub estimate: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub batch: usize,
    pub layers: Vec<LayerCost>,
    /// Forward work outside the layers: head, loss.
    pub exact_rest: Counters,
    pub estimate_rest: Counters,
    /// Whole step, backward included.
    pub exact_total: Counters,
    pub estimate_total: Counters,
}

impl FlopsReport {
    /// Estimated over exact statistics multiplies.
    pub fn stats_ratio(&self) -> f64 {
        self.estimate_total.stats as f64 / self.exact_total.stats as f64
    }

    /// Estimated over exact multiplies for the whole step.
    pub fn step_ratio(&self) -> f64 {
        self.estimate_total.total() as f64 / self.exact_total.total() as f64
    }

    /// Forward totals equal the per-layer counters plus the rest.
    pub fn totals_consistent(&self) -> bool {
        let sum = |f: fn(&LayerCost) -> Counters, rest: Counters| {
            self.layers.iter().map(f).fold(rest, |mut acc, c| {
                acc.compute += c.compute;
                acc.stats += c.stats;
                acc
            })
        };
        let e = sum(|l| l.exact, self.exact_rest);
        let s = sum(|l| l.estimate, self.estimate_rest);
        e.forward() == self.exact_total.forward()
            && e.stats == self.exact_total.stats
            && s.forward() == self.estimate_total.forward()
            && s.stats == self.estimate_total.stats
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "batch {}\n{:<6} {:>5} {:>5} {:>14} {:>14} {:>14} {:>14} {:>8}\n",
            self.batch, "layer", "in", "out", "bn.stats", "bnest.stats", "bn.compute", "bnest.compute", "ratio"
        );
        let row = |name: String, cin: String, cout: String, e: &Counters, s: &Counters| {
            let ratio = if e.stats > 0 { format!("{:.4}", s.stats as f64 / e.stats as f64) } else { "-".into() };
            format!(
                "{:<6} {:>5} {:>5} {:>14} {:>14} {:>14} {:>14} {:>8}\n",
                name, cin, cout, e.stats, s.stats, e.compute, s.compute, ratio
            )
        };
        for l in &self.layers {
            out += &row(l.layer.to_string(), l.in_channels.to_string(), l.out_channels.to_string(), &l.exact, &l.estimate);
        }
        out += &row("rest".into(), "".into(), "".into(), &self.exact_rest, &self.estimate_rest);
        out += &row("total".into(), "".into(), "".into(), &self.exact_total, &self.estimate_total);
        out += &format!(
            "backward: bn {} bnest {}\nstep total: bn {} bnest {} (ratio {:.4})\n",
            self.exact_total.backward,
            self.estimate_total.backward,
            self.exact_total.total(),
            self.estimate_total.total(),
            self.step_ratio()
        );
        out
    }
}

fn with_bn_mode(cfg: &ExperimentConfig, mode: BnMode) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.strategy.name = Strategy::Repq;
    c.strategy.bn_mode = mode;
    c
}

/// Per-layer forward counts and the step total for one train step.
fn measure(cfg: &ExperimentConfig, data: &Dataset, indices: &[usize]) -> Result<(Vec<Counters>, Counters)> {
    let arch = Architecture::from_config(cfg, data.classes);
    let mut model = Model::<f32>::build(&arch, StageForm::Reparametrized, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut g = Graph::new();
    let binds = model.store.bind(&mut g)?;
    let (x, labels) = data.batch::<f32>(indices);
    let x = g.constant(x)?;
    let out = model.forward(&mut g, &binds, x, Pass::train(Path::Merged))?;
    let loss = g.softmax_cross_entropy(out.logits, &labels)?;
    g.backward(loss)?;
    Ok((out.layer_counts.into_iter().map(Counters::from).collect(), g.counts().into()))
}

/// Count one training step of the configured architecture with exact BN
/// folding and with estimated statistics. Layer overrides and
/// `keep_bn_last` apply to the estimated run.
pub fn flops_report(cfg: &ExperimentConfig) -> Result<FlopsReport> {
    let (train, _) = data::load(&cfg.dataset)?;
    let batch = cfg.strategy.fp.batch_size.min(train.len());
    let indices: Vec<usize> = (0..batch).collect();
    let (exact_layers, exact_total) = measure(&with_bn_mode(cfg, BnMode::ExactFold), &train, &indices)?;
    let (est_layers, estimate_total) = measure(&with_bn_mode(cfg, BnMode::Estimate), &train, &indices)?;
    let mut cin = cfg.input_channels();
    let layers: Vec<LayerCost> = exact_layers
        .iter()
        .zip(&est_layers)
        .enumerate()
        .map(|(i, (&exact, &estimate))| {
            let l = LayerCost {
                layer: i,
                in_channels: cin,
                out_channels: cfg.widths[i],
                exact,
                estimate,
            };
            cin = cfg.widths[i];
            l
        })
        .collect();
    let rest = |layers: &[Counters], total: Counters| Counters {
        compute: total.compute - layers.iter().map(|c| c.compute).sum::<u64>(),
        stats: total.stats - layers.iter().map(|c| c.stats).sum::<u64>(),
        backward: 0,
    };
    Ok(FlopsReport {
        batch,
        exact_rest: rest(&exact_layers, exact_total),
        estimate_rest: rest(&est_layers, estimate_total),
        layers,
        exact_total,
        estimate_total,
    })
}

/// Statistics multiplies for BN after one `k x k` same-padded convolution
/// on a `[b, h, w, cin]` input.
pub fn conv_stats_cost(b: usize, h: usize, w: usize, cin: usize, cout: usize, k: usize, method: StatsMethod) -> Result<u64> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![b, h, w, cin]))?;
    let wv = g.constant(Tensor::zeros(vec![k, k, cin, cout]))?;
    match method {
        StatsMethod::Exact => {
            let y = batchnorm::as_stats(&mut g, |g| g.conv2d(x, wv, Padding::Same))?;
            batchnorm::batch_stats(&mut g, y)?;
        }
        StatsMethod::Estimate => {
            batchnorm::bn_est_mean(&mut g, x, wv)?;
            batchnorm::bn_est_var(&mut g, x, wv)?;
        }
    }
    Ok(g.counts().stats)
}
