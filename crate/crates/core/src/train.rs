//! The training loop, evaluation and run metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::transform::{eval_transform, stack, train_transform, EvalConfig, PcaBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::{init_model, InitPolicy};
use crate::loss::{distill_loss, mixup, targets_tensor, DistillContext, TargetDistribution};
use crate::model::{build_resnet, Model};
use crate::optim::{param_groups, Nag};
use crate::precision::{apply_update, StepOutcome};
use crate::rng::{stream_rng, Stream};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// Pixels sampled when estimating the color PCA basis.
const PCA_PIXELS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Learning rate of the epoch's first batch.
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global batch index, counted from 1.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub skipped_steps: usize,
}

impl RunMetrics {
    /// Copy with wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        m
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Manifest of a checkpoint written by an earlier run of the same config.
    pub resume: Option<PathBuf>,
    /// Stop after this epoch even if the config asks for more.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    /// Manifest of the last checkpoint written.
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Whether `label` is among the `k` largest entries of `logits`, ranking
/// equal logits by lower class index first.
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let z = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    rank < k
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    let k = shape[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {k} classes"
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(Accuracy::default());
    }
    let (mut h1, mut h5) = (0usize, 0usize);
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        h1 += in_top_k(row, l, 1) as usize;
        h5 += in_top_k(row, l, 5) as usize;
    }
    Ok(Accuracy {
        top1: h1 as f64 / n as f64,
        top5: h5 as f64 / n as f64,
        samples: n,
    })
}

fn check_classes(model: &Model, ds: &Dataset) -> Result<()> {
    if model.graph.num_classes != ds.num_classes {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes but the dataset has {}",
            model.graph.num_classes, ds.num_classes
        )));
    }
    Ok(())
}

/// Eval-mode logits for every sample, `(N, K)`.
pub fn dataset_logits(
    model: &mut Model,
    ds: &Dataset,
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Tensor> {
    check_classes(model, ds)?;
    let k = model.graph.num_classes;
    let mut data = Vec::with_capacity(ds.len() * k);
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let inputs = chunk
            .iter()
            .map(|s| eval_transform(s, cfg))
            .collect::<Result<Vec<_>>>()?;
        data.extend_from_slice(model.predict(&stack(&inputs)?, Mode::Eval)?.data());
    }
    Tensor::new(vec![ds.len(), k], data)
}

pub fn evaluate_model(
    model: &mut Model,
    ds: &Dataset,
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Accuracy> {
    check_classes(model, ds)?;
    if ds.is_empty() {
        return Ok(Accuracy::default());
    }
    let logits = dataset_logits(model, ds, cfg, batch_size)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    accuracy(&logits, &labels)
}

/// Top-1/top-5 of a saved checkpoint on `ds`, using the checkpoint's eval preprocessing.
pub fn evaluate(manifest: &Path, ds: &Dataset) -> Result<Accuracy> {
    let ckpt = checkpoint::load(manifest)?;
    let mut model = ckpt.restore_model()?;
    let cfg = &ckpt.manifest.config;
    evaluate_model(&mut model, ds, &cfg.eval_config(), cfg.batch_size)
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Fresh model for `config`, initialized and switched to its precision.
pub fn build_model(config: &TrainConfig) -> Result<Model> {
    let m = &config.model;
    let mut model = Model::new(build_resnet(m.depth, m.variant, m.classes, m.input_size())?)?;
    init_model(
        &mut model,
        &InitPolicy::new(config.seed).with_zero_gamma(config.init.zero_gamma),
    )?;
    model.bn = config.bn;
    model.set_precision(&config.precision);
    Ok(model)
}

/// Loads the datasets named by `config` and trains.
pub fn train(config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_ds, val_ds) = config.load_datasets()?;
    train_with_data(config, &train_ds, &val_ds, opts)
}

pub fn train_with_data(
    config: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let b = config.batch_size;
    if b == 0 || config.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let batches_per_epoch = train_ds.len() / b;
    if batches_per_epoch == 0 {
        return Err(Error::Config(format!(
            "training set of {} samples is smaller than one batch of {b}",
            train_ds.len()
        )));
    }
    ensure_writable(&config.output_dir)?;

    let mut model = build_model(config)?;
    check_classes(&model, train_ds)?;
    check_classes(&model, val_ds)?;
    let mut optimizer = Nag::new(config.optim.momentum);
    let mut metrics = RunMetrics::default();
    let mut start_epoch = 1;
    if let Some(path) = &opts.resume {
        let ckpt = checkpoint::load(path)?;
        if &ckpt.manifest.config != config {
            return Err(Error::Config(format!(
                "checkpoint {} was written by a different config",
                path.display()
            )));
        }
        model = ckpt.restore_model()?;
        optimizer = ckpt.restore_optimizer(&model)?;
        metrics = ckpt.manifest.metrics.clone();
        start_epoch = ckpt.manifest.epoch + 1;
    }

    let mut teacher = match &config.loss.distill {
        Some(d) => {
            let t = checkpoint::load(&d.teacher_checkpoint)?.restore_model()?;
            if t.graph.num_classes != config.model.classes
                || t.graph.input_size != config.model.input_size()
            {
                return Err(Error::Config(
                    "teacher and student disagree on classes or input size".into(),
                ));
            }
            Some((t, d.temperature))
        }
        None => None,
    };

    let mut augment = config.augment_config();
    if let (Some(cache), true) = (&config.data.pca_cache, augment.pca_std > 0.0) {
        augment.pca = PcaBasis::load_or_estimate(cache, train_ds, PCA_PIXELS)?;
    }
    let eval_cfg = config.eval_config();
    let groups = param_groups(
        &model.params,
        config.optim.weight_decay,
        config.optim.no_bias_decay,
    );
    let epochs = config.effective_epochs();
    let schedule = Schedule::for_run(
        config.base_lr(),
        epochs,
        config.schedule.warmup_epochs,
        batches_per_epoch,
        config.schedule.decay(),
    );
    let classes = config.model.classes;
    let smoothing = config.loss.label_smoothing;
    let last_epoch = opts.stop_after.map_or(epochs, |s| s.min(epochs));
    let mut manifest = opts.resume.clone().unwrap_or_default();

    for epoch in start_epoch..=last_epoch {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut stream_rng(
            config.seed,
            Stream::Shuffle,
            epoch as u64,
            0,
        ));
        let mut loss_sum = 0.0;
        let mut epoch_lr = 0.0;
        for (bi, idx) in order.chunks_exact(b).enumerate() {
            let step = (epoch - 1) * batches_per_epoch + bi + 1;
            let lr = schedule.lr_at(step);
            if bi == 0 {
                epoch_lr = lr;
            }
            let inputs = idx
                .iter()
                .map(|&i| {
                    let mut rng = stream_rng(config.seed, Stream::Augment, epoch as u64, i as u64);
                    train_transform(&train_ds.samples[i], &augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut inputs = stack(&inputs)?;
            let mut targets = idx
                .iter()
                .map(|&i| {
                    let label = train_ds.samples[i].label;
                    if smoothing > 0.0 {
                        TargetDistribution::smooth(label, classes, smoothing)
                    } else {
                        TargetDistribution::one_hot(label, classes)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(alpha) = config.loss.mixup_alpha {
                let mut rng = stream_rng(config.seed, Stream::Mixup, epoch as u64, bi as u64);
                let mixed = mixup(&inputs, &targets, alpha, &mut rng)?;
                inputs = mixed.inputs;
                targets = mixed.targets;
            }
            let target = targets_tensor(&targets)?;

            let diverged = Error::NonFiniteLoss {
                epoch,
                batch: bi + 1,
            };
            let mut tape = Tape::new();
            let x = tape.constant(inputs.clone());
            let z = model.forward(&mut tape, x, Mode::Train)?;
            if !tape.value(z).all_finite() {
                return Err(diverged);
            }
            let loss = match teacher.as_mut() {
                Some((t, temperature)) => {
                    let ctx = DistillContext::new(t.predict(&inputs, Mode::Eval)?, *temperature)?;
                    distill_loss(&mut tape, z, &target, &ctx)?
                }
                None => tape.soft_cross_entropy(z, &target)?,
            };
            let loss_value = tape.value(loss).item()? as f64;
            if !loss_value.is_finite() {
                return Err(diverged);
            }
            model.params.zero_grad();
            tape.backward_into(loss, &mut model.params, config.precision.backward_seed())?;
            let outcome = apply_update(
                &mut model.params,
                &mut optimizer,
                &groups,
                lr as f32,
                &config.precision,
            )?;
            let skipped = outcome == StepOutcome::Skipped;
            metrics.skipped_steps += skipped as usize;
            metrics.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: loss_value,
                skipped,
            });
            loss_sum += loss_value;
        }
        let acc = evaluate_model(&mut model, val_ds, &eval_cfg, b)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_top1: acc.top1,
            val_top5: acc.top5,
            lr: epoch_lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        manifest = checkpoint::save(
            &config.output_dir,
            epoch,
            config,
            &metrics,
            &model,
            &optimizer,
        )?;
        let path = config.output_dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&metrics)?)
            .map_err(|e| Error::io(&path, e))?;
        if opts.verbose {
            let e = metrics.epochs.last().expect("just pushed");
            eprintln!(
                "epoch {epoch}/{epochs}: loss {:.4} top1 {:.4} top5 {:.4} lr {:.5} ({:.1}s)",
                e.train_loss, e.val_top1, e.val_top5, e.lr, e.wall_time_s
            );
        }
    }
    Ok(TrainOutcome {
        metrics,
        checkpoint: manifest,
    })
}
