//! FP pre-training, conversion for QAT, quantization-aware training.

use std::collections::BTreeMap;
use std::path::Path as FsPath;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repq::{Graph, MultCounts, ParamId, Scalar};

use crate::checkpoint::Checkpoint;
use crate::config::{BnMode, Compute, ExperimentConfig, StageForm, Strategy};
use crate::data::{self, Dataset};
use crate::error::{Result, TrainError};
use crate::metrics::{write_summary, Counters, EpochRecord, RunMetrics, SummaryRow};
use crate::model::{Architecture, Model, Pass, Path};
use crate::optim::{cosine_lr, Sgd, SgdConfig};

pub const FP_STAGE: &str = "fp";
pub const QAT_STAGE: &str = "qat";

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd: SgdConfig,
    pub path: Path,
}

impl StageParams {
    pub fn fp(cfg: &ExperimentConfig) -> Self {
        let s = &cfg.strategy;
        StageParams {
            name: FP_STAGE.into(),
            epochs: s.fp.epochs,
            batch_size: s.fp.batch_size,
            lr: s.fp.lr,
            sgd: SgdConfig {
                momentum: s.fp.momentum,
                weight_decay: s.fp.weight_decay,
                steps_lr_ratio: s.qat.steps_lr_ratio,
            },
            path: fp_path(cfg),
        }
    }

    pub fn qat(cfg: &ExperimentConfig) -> Self {
        StageParams {
            name: QAT_STAGE.into(),
            epochs: cfg.strategy.qat.epochs,
            lr: cfg.strategy.qat_lr(),
            path: qat_path(cfg),
            ..Self::fp(cfg)
        }
    }
}

/// BN estimation replaces BN on both stages, which needs the merged path.
pub fn fp_path(cfg: &ExperimentConfig) -> Path {
    match (cfg.strategy.bn_mode, cfg.strategy.fp.compute) {
        (BnMode::Estimate, _) | (_, Compute::Merged) => Path::Merged,
        (_, Compute::Expanded) => Path::Expanded,
    }
}

/// Regular QAT quantizes the conv and keeps its BN; RepQ quantizes the
/// merged weight.
pub fn qat_path(cfg: &ExperimentConfig) -> Path {
    match (cfg.strategy.name, cfg.strategy.bn_mode) {
        (Strategy::Plain, BnMode::ExactFold) => Path::Expanded,
        _ => Path::Merged,
    }
}

pub struct StepResult {
    pub loss: f64,
    pub counts: MultCounts,
}

/// One SGD step on the batch `indices`.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    indices: &[usize],
    path: Path,
    opt: &mut Sgd<T>,
    lr: f64,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let binds = model.store.bind(&mut g)?;
    let (x, labels) = data.batch::<T>(indices);
    let x = g.constant(x)?;
    let out = model.forward(&mut g, &binds, x, Pass::train(path))?;
    let loss = g.softmax_cross_entropy(out.logits, &labels)?;
    let value = g.value(loss).data()[0].as_f64();
    g.backward(loss)?;
    let grads: Vec<(ParamId, Vec<T>)> = model
        .store
        .ids()
        .filter(|&id| model.store.kind(id).trainable())
        .filter_map(|id| g.grad(binds.var(id)).map(|gr| (id, gr.to_vec())))
        .collect();
    opt.step(&mut model.store, &grads, lr)?;
    Ok(StepResult {
        loss: value,
        counts: g.counts(),
    })
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset, batch: usize, path: Path) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for idx in data.sequential_batches(batch) {
        let logits = predict(model, data, &idx, path)?;
        let k = model.classes;
        for (r, label) in idx.iter().map(|&i| data.labels()[i]).enumerate() {
            let row = &logits[r * k..(r + 1) * k];
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (arg == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode logits for the images at `indices`, row-major `[B, classes]`.
pub fn predict<T: Scalar>(model: &mut Model<T>, data: &Dataset, indices: &[usize], path: Path) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let binds = model.store.bind(&mut g)?;
    let (x, _) = data.batch::<T>(indices);
    let x = g.constant(x)?;
    let out = model.forward(&mut g, &binds, x, Pass::eval(path))?;
    Ok(g.value(out.logits).data().to_vec())
}

/// MinError-initialize every quantizer from one batch.
pub fn calibrate<T: Scalar>(model: &mut Model<T>, data: &Dataset, indices: &[usize], path: Path) -> Result<()> {
    let mut g = Graph::new();
    let binds = model.store.bind(&mut g)?;
    let (x, _) = data.batch::<T>(indices);
    let x = g.constant(x)?;
    let pass = Pass {
        update_running: false,
        calibrate: true,
        ..Pass::train(path)
    };
    model.forward(&mut g, &binds, x, pass)?;
    Ok(())
}

fn diverged(e: TrainError, stage: &str, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::Core(repq::Error::NonFinite { op }) => TrainError::Diverged {
            stage: stage.into(),
            epoch,
            step,
            detail: format!("non-finite values in `{op}`"),
        },
        e => e,
    }
}

/// Train for `stage.epochs` epochs with cosine decay over all steps,
/// evaluating after every epoch.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: &Dataset,
    stage: &StageParams,
    seed: u64,
    metrics: &mut RunMetrics,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    let per_epoch = train.len().div_ceil(stage.batch_size);
    let total = per_epoch * stage.epochs;
    let mut opt = Sgd::new(stage.sgd.clone());
    let mut step = 0;
    for epoch in 0..stage.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut counters = Counters::default();
        let mut lr = stage.lr;
        for idx in train.epoch_batches(stage.batch_size, seed, epoch) {
            lr = cosine_lr(stage.lr, step, total);
            let r = train_step(model, train, &idx, stage.path, &mut opt, lr).map_err(|e| diverged(e, &stage.name, epoch, step))?;
            if !r.loss.is_finite() {
                return Err(diverged(
                    TrainError::Core(repq::Error::NonFinite { op: "loss" }),
                    &stage.name,
                    epoch,
                    step,
                ));
            }
            loss_sum += r.loss * idx.len() as f64;
            counters += r.counts.into();
            step += 1;
        }
        let eval_accuracy = evaluate(model, eval, stage.batch_size, stage.path)?;
        let record = EpochRecord {
            stage: stage.name.clone(),
            epoch,
            seed,
            lr,
            train_loss: loss_sum / train.len() as f64,
            eval_accuracy,
            wall_ms: start.elapsed().as_millis() as u64,
            mults: counters,
        };
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(())
}

fn meta(stage: &str, model_layout: String, cfg: &ExperimentConfig, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), stage.to_string()),
        ("layout".to_string(), model_layout),
        ("strategy".to_string(), cfg.strategy.name.name().to_string()),
        ("bn_mode".to_string(), cfg.strategy.bn_mode.name().to_string()),
        ("seed".to_string(), seed.to_string()),
    ])
}

pub fn checkpoint<T: Scalar>(model: &Model<T>, stage: &str, cfg: &ExperimentConfig, seed: u64) -> Checkpoint<T> {
    Checkpoint::from_store(&model.store, meta(stage, model.layout(), cfg, seed))
}

/// Build the QAT model from an FP checkpoint: Plain keeps the regular
/// layers, Merged folds each block into one conv with bias, RepQ keeps the
/// blocks. Quantizers are attached but not yet initialized.
pub fn convert_for_qat<T: Scalar>(ckpt: &Checkpoint<T>, cfg: &ExperimentConfig, arch: &Architecture) -> Result<Model<T>> {
    let fp_form = cfg.strategy.name.fp_stage();
    let mut model = Model::<T>::build(arch, fp_form, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = model.layout();
    match ckpt.meta.get("layout") {
        Some(l) if *l == expected => {}
        found => {
            return Err(TrainError::Checkpoint(format!(
                "topology mismatch: checkpoint has `{}`, strategy expects `{expected}`",
                found.map_or("<none>", |s| s.as_str())
            )))
        }
    }
    model.store.load_map(&ckpt.tensors())?;
    if cfg.strategy.name.qat_stage() == StageForm::Regular && fp_form == StageForm::Reparametrized {
        model = model.fold_blocks()?;
    }
    model.attach_quantizers(|i| cfg.bits_for(i), cfg.head_bits())?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub fp_accuracy: f64,
    pub qat_accuracy: f64,
    pub metrics: RunMetrics,
    pub rows: Vec<SummaryRow>,
}

fn best_or_eval<T: Scalar>(metrics: &RunMetrics, stage: &str, model: &mut Model<T>, eval: &Dataset, batch: usize, path: Path) -> Result<f64> {
    match metrics.best(stage) {
        Some(a) => Ok(a),
        None => evaluate(model, eval, batch, path),
    }
}

/// Full two-stage run for one seed. With `out_dir`, writes `fp.ckpt`,
/// `qat.ckpt`, `metrics.jsonl` and `summary.csv` there.
pub fn run_seed<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&FsPath>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<SeedOutcome> {
    let (train, eval) = data::load(&cfg.dataset)?;
    run_seed_on::<T>(cfg, seed, &train, &eval, out_dir, on_epoch)
}

pub fn run_seed_on<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    eval: &Dataset,
    out_dir: Option<&FsPath>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<SeedOutcome> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let mut metrics = RunMetrics::default();
    let fp = train_fp::<T>(cfg, seed, train, eval, &mut metrics, on_epoch)?;
    let qat = train_qat(cfg, &fp.checkpoint, seed, train, eval, &mut metrics, on_epoch)?;

    let row = |bits: u32, metric: f64| SummaryRow {
        model: cfg.model.name().into(),
        strategy: cfg.strategy.name.name().into(),
        bn_mode: cfg.strategy.bn_mode.name().into(),
        bits,
        seed,
        metric,
    };
    let rows = vec![row(repq::quant::DISABLED_BITS, fp.accuracy), row(cfg.bits, qat.accuracy)];
    if let Some(dir) = out_dir {
        fp.checkpoint.save(&dir.join("fp.ckpt"))?;
        qat.checkpoint.save(&dir.join("qat.ckpt"))?;
        metrics.write(&dir.join("metrics.jsonl"))?;
        write_summary(&dir.join("summary.csv"), &rows)?;
    }
    Ok(SeedOutcome {
        seed,
        fp_accuracy: fp.accuracy,
        qat_accuracy: qat.accuracy,
        metrics,
        rows,
    })
}

/// A trained stage: final model, its checkpoint and the selected metric
/// (best eval accuracy over epochs).
pub struct StageOutcome<T> {
    pub model: Model<T>,
    pub checkpoint: Checkpoint<T>,
    pub accuracy: f64,
}

/// FP pre-training from a fresh `seed` initialization.
pub fn train_fp<T: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    eval: &Dataset,
    metrics: &mut RunMetrics,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<StageOutcome<T>> {
    let arch = Architecture::from_config(cfg, train.classes);
    let stage = StageParams::fp(cfg);
    let mut model = Model::<T>::build(&arch, cfg.strategy.name.fp_stage(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    fit(&mut model, train, eval, &stage, seed, metrics, on_epoch)?;
    let accuracy = best_or_eval(metrics, FP_STAGE, &mut model, eval, stage.batch_size, Path::Merged)?;
    let checkpoint = checkpoint(&model, FP_STAGE, cfg, seed);
    Ok(StageOutcome {
        model,
        checkpoint,
        accuracy,
    })
}

/// Conversion, MinError calibration on the first batch, then QAT.
pub fn train_qat<T: Scalar>(
    cfg: &ExperimentConfig,
    fp: &Checkpoint<T>,
    seed: u64,
    train: &Dataset,
    eval: &Dataset,
    metrics: &mut RunMetrics,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<StageOutcome<T>> {
    let arch = Architecture::from_config(cfg, train.classes);
    let stage = StageParams::qat(cfg);
    let mut model = convert_for_qat(fp, cfg, &arch)?;
    if model.is_quantized() {
        let first = train.epoch_batches(stage.batch_size, seed, 0).swap_remove(0);
        calibrate(&mut model, train, &first, stage.path)?;
    }
    fit(&mut model, train, eval, &stage, seed, metrics, on_epoch)?;
    let accuracy = best_or_eval(metrics, QAT_STAGE, &mut model, eval, stage.batch_size, stage.path)?;
    let checkpoint = checkpoint(&model, QAT_STAGE, cfg, seed);
    Ok(StageOutcome {
        model,
        checkpoint,
        accuracy,
    })
}

/// Directory of one seed's outputs under the experiment's output dir.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> std::path::PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}
