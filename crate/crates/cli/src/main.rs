use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tricks_core::ablate::{ablate, parse_stack, AblateOptions};
use tricks_core::checkpoint;
use tricks_core::config::TrainConfig;
use tricks_core::cost::analyze;
use tricks_core::data::{cifar, image_dir, Dataset};
use tricks_core::model::{build_resnet, Depth, Variant};
use tricks_core::report::{gap_report, to_csv};
use tricks_core::schedule::{scaled_lr, Decay, Schedule};
use tricks_core::train::{evaluate, train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "tricks",
    version,
    about = "Train and inspect ResNet image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    Step,
    Cosine,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint manifest written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch (a later --resume picks up from there).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Top-1/top-5 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 binary directory (its test batch is used) or an image
        /// directory laid out as <class>/<image>.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Parameter and FLOP counts of a network.
    Analyze {
        #[arg(long, default_value = "50")]
        depth: Depth,
        #[arg(long, default_value = "A")]
        variant: Variant,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Also emit the report as JSON, to the given file or stdout.
        #[arg(long, num_args = 0..=1)]
        json: Option<Option<PathBuf>>,
    },
    /// Learning-rate schedule of a run.
    Schedule {
        /// Emit one `batch,lr` CSV row per batch.
        #[arg(long)]
        plot: bool,
        /// Take the schedule from a training config instead of the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to 0.1 * batch_size / 256.
        #[arg(long)]
        base_lr: Option<f64>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 120)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 5000)]
        batches_per_epoch: usize,
        #[arg(long, value_enum, default_value = "cosine")]
        decay: DecayArg,
        #[arg(long, value_delimiter = ',', default_value = "30,60,90")]
        milestones: Vec<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train a baseline and then add one refinement at a time.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated refinements: cosine, smooth, mixup, distill.
        #[arg(long, default_value = "cosine,smooth,mixup,distill")]
        stack: String,
        /// Teacher checkpoint for distillation; trained on the fly if absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Histogram of the top-logit gap over a validation set, as CSV.
    GapReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint config's validation set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_eval_data(dir: &Path) -> Result<Dataset> {
    if cifar::is_cifar_dir(dir) || dir.join(cifar::TEST_FILE).is_file() {
        let samples = cifar::load_file(&dir.join(cifar::TEST_FILE))?;
        return Ok(Dataset::new(samples, cifar::CLASSES)?);
    }
    if dir.join("val").is_dir() {
        return Ok(image_dir::load(&dir.join("val"))?);
    }
    Ok(image_dir::load(dir)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            stop_after,
            quiet,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let opts = TrainOptions {
                resume,
                stop_after,
                verbose: !quiet,
            };
            let out = train(&cfg, &opts)?;
            if let Some(last) = out.metrics.final_epoch() {
                println!(
                    "epoch {}: train loss {:.4}, top-1 {:.2}%, top-5 {:.2}%",
                    last.epoch,
                    last.train_loss,
                    100.0 * last.val_top1,
                    100.0 * last.val_top5
                );
            }
            if out.metrics.skipped_steps > 0 {
                println!(
                    "{} steps skipped on non-finite gradients",
                    out.metrics.skipped_steps
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            limit,
        } => {
            let ds = load_eval_data(&data)?.truncated(limit);
            let acc = evaluate(&checkpoint, &ds)?;
            println!(
                "{} samples: top-1 {:.2}%, top-5 {:.2}%",
                acc.samples,
                100.0 * acc.top1,
                100.0 * acc.top5
            );
        }
        Command::Analyze {
            depth,
            variant,
            input_size,
            classes,
            json,
        } => {
            let graph = build_resnet(depth, variant, classes, input_size)?;
            let report = analyze(&graph, input_size)?;
            print!("{}", report.to_table());
            if let Some(target) = json {
                let doc = serde_json::to_string_pretty(&report)? + "\n";
                emit(target.as_deref(), &doc)?;
            }
        }
        Command::Schedule {
            plot,
            config,
            base_lr,
            batch_size,
            epochs,
            warmup_epochs,
            batches_per_epoch,
            decay,
            milestones,
            out,
        } => {
            let schedule = match config {
                Some(path) => {
                    let cfg = TrainConfig::load(&path)?;
                    let (train_ds, _) = cfg.load_datasets()?;
                    let per = train_ds.len() / cfg.batch_size;
                    if per == 0 {
                        bail!("training set smaller than one batch");
                    }
                    Schedule::for_run(
                        cfg.base_lr(),
                        cfg.effective_epochs(),
                        cfg.schedule.warmup_epochs,
                        per,
                        cfg.schedule.decay(),
                    )
                }
                None => {
                    let decay = match decay {
                        DecayArg::Cosine => Decay::Cosine,
                        DecayArg::Step => Decay::Step {
                            milestones,
                            factor: 0.1,
                        },
                    };
                    let base = base_lr.unwrap_or_else(|| scaled_lr(batch_size));
                    Schedule::for_run(base, epochs, warmup_epochs, batches_per_epoch, decay)
                }
            };
            let text = if plot {
                let mut s = String::from("batch,lr\n");
                for (t, lr) in schedule.curve() {
                    s.push_str(&format!("{t},{lr}\n"));
                }
                s
            } else {
                let per = schedule.batches_per_epoch;
                let mut s = format!(
                    "base lr {}, {} batches ({} warmup), {} per epoch\n",
                    schedule.base_lr,
                    schedule.total_batches(),
                    schedule.warmup_batches,
                    per
                );
                for epoch in 0..schedule.total_batches().div_ceil(per) {
                    s.push_str(&format!(
                        "epoch {:>4}: {:.6}\n",
                        epoch + 1,
                        schedule.lr_at(epoch * per + 1)
                    ));
                }
                s
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Ablate {
            config,
            stack,
            teacher,
            quiet,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let stack = parse_stack(&stack)?;
            let (train_ds, val_ds) = cfg.load_datasets()?;
            let report = ablate(
                &cfg,
                &stack,
                &train_ds,
                &val_ds,
                &AblateOptions {
                    teacher,
                    verbose: !quiet,
                },
            )?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("ablation.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.to_table());
        }
        Command::GapReport {
            checkpoint,
            data,
            bins,
            limit,
            out,
        } => {
            let ds = match data {
                Some(dir) => load_eval_data(&dir)?,
                None => {
                    checkpoint::load(&checkpoint)?
                        .manifest
                        .config
                        .load_datasets()?
                        .1
                }
            };
            let hist = gap_report(&checkpoint, &ds.truncated(limit), bins)?;
            emit(out.as_deref(), &to_csv(&hist))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
