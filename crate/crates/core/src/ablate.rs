//! Stacked refinement studies: train a baseline, then add one refinement
//! at a time and tabulate the results.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DecayKind, DistillConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{train_with_data, TrainOptions};

pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_MIXUP_ALPHA: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    Cosine,
    Smooth,
    Mixup,
    Distill,
}

impl Refinement {
    pub fn label(self) -> &'static str {
        match self {
            Refinement::Cosine => "+ cosine decay",
            Refinement::Smooth => "+ label smoothing",
            Refinement::Mixup => "+ mixup",
            Refinement::Distill => "+ distillation",
        }
    }

    /// The config key this refinement sets.
    pub fn key(self) -> &'static str {
        match self {
            Refinement::Cosine => "schedule.kind",
            Refinement::Smooth => "loss.label_smoothing",
            Refinement::Mixup => "loss.mixup_alpha",
            Refinement::Distill => "loss.distill",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, teacher: Option<&Path>) -> Result<()> {
        match self {
            Refinement::Cosine => cfg.schedule.kind = DecayKind::Cosine,
            Refinement::Smooth => cfg.loss.label_smoothing = DEFAULT_SMOOTHING,
            Refinement::Mixup => cfg.loss.mixup_alpha = Some(DEFAULT_MIXUP_ALPHA),
            Refinement::Distill => {
                let teacher = teacher.ok_or_else(|| {
                    Error::Config("distillation needs a teacher checkpoint".into())
                })?;
                cfg.loss.distill = Some(DistillConfig {
                    teacher_checkpoint: teacher.to_path_buf(),
                    temperature: DEFAULT_TEMPERATURE,
                });
            }
        }
        Ok(())
    }
}

impl FromStr for Refinement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Refinement::Cosine),
            "smooth" | "smoothing" | "label-smoothing" => Ok(Refinement::Smooth),
            "mixup" => Ok(Refinement::Mixup),
            "distill" | "distillation" => Ok(Refinement::Distill),
            other => Err(Error::InvalidArgument(format!(
                "unknown refinement {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Refinement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn parse_stack(list: &str) -> Result<Vec<Refinement>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&path, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Dotted keys whose values differ between two configs, ignoring
/// `output_dir`. A key present on one side only (such as an optional
/// section switched on) is reported once at its top-most path.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    leaves("", &va, &mut la);
    leaves("", &vb, &mut lb);
    let lookup =
        |l: &[(String, Value)], k: &str| l.iter().find(|(p, _)| p == k).map(|(_, v)| v.clone());
    let mut keys: Vec<String> = la.iter().chain(&lb).map(|(k, _)| k.clone()).collect();
    keys.sort();
    keys.dedup();
    let mut diff: Vec<String> = Vec::new();
    for k in keys {
        if k == "output_dir" || lookup(&la, &k) == lookup(&lb, &k) {
            continue;
        }
        // collapse children of a section that is null on the other side
        let mut top = k.clone();
        let mut prefix = String::new();
        for part in k.split('.') {
            prefix = if prefix.is_empty() {
                part.to_string()
            } else {
                format!("{prefix}.{part}")
            };
            if lookup(&la, &prefix) == Some(Value::Null)
                || lookup(&lb, &prefix) == Some(Value::Null)
            {
                top = prefix.clone();
                break;
            }
        }
        if !diff.contains(&top) {
            diff.push(top);
        }
    }
    Ok(diff)
}

/// One labelled config per row: the baseline, then each refinement added on
/// top of the previous row. Row `i` writes into `<output_dir>/<i>-<name>`.
pub fn stacked_configs(
    base: &TrainConfig,
    stack: &[Refinement],
    teacher: Option<&Path>,
) -> Result<Vec<(String, TrainConfig)>> {
    let mut rows = Vec::with_capacity(stack.len() + 1);
    let mut cfg = base.clone();
    cfg.output_dir = base.output_dir.join("0-baseline");
    rows.push(("baseline".to_string(), cfg.clone()));
    for (i, r) in stack.iter().enumerate() {
        if stack[..i].contains(r) {
            return Err(Error::InvalidArgument(format!(
                "refinement {r:?} listed twice"
            )));
        }
        r.apply(&mut cfg, teacher)?;
        cfg.output_dir = base
            .output_dir
            .join(format!("{}-{:?}", i + 1, r).to_ascii_lowercase());
        rows.push((r.label().to_string(), cfg.clone()));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub changed: Vec<String>,
    pub epochs: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Teacher checkpoint used by the distillation row, if any.
    pub teacher: Option<PathBuf>,
}

impl AblationReport {
    /// Markdown table with one row per stacked configuration.
    pub fn to_table(&self) -> String {
        let mut s = String::from(
            "| Refinements | Epochs | Train loss | Top-1 | Top-5 |\n|---|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {:.4} | {:.2} | {:.2} |\n",
                r.label,
                r.epochs,
                r.train_loss,
                100.0 * r.top1,
                100.0 * r.top5
            ));
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblateOptions {
    /// Teacher for the distillation row. Without one, a deeper desk model
    /// is trained with the preceding row's recipe.
    pub teacher: Option<PathBuf>,
    pub verbose: bool,
}

fn teacher_config(student: &TrainConfig, base_dir: &Path) -> Result<TrainConfig> {
    let deeper = student.model.depth.deeper().ok_or_else(|| {
        Error::Config(format!(
            "no deeper preset to train a teacher for {}; pass a teacher checkpoint",
            student.model.depth
        ))
    })?;
    let mut t = student.clone();
    t.model.depth = deeper;
    t.loss.distill = None;
    t.output_dir = base_dir.join("teacher");
    Ok(t)
}

pub fn ablate(
    base: &TrainConfig,
    stack: &[Refinement],
    train_ds: &Dataset,
    val_ds: &Dataset,
    opts: &AblateOptions,
) -> Result<AblationReport> {
    let train_opts = TrainOptions {
        verbose: opts.verbose,
        ..TrainOptions::default()
    };
    let mut teacher = opts.teacher.clone();
    if teacher.is_none() {
        if let Some(pos) = stack.iter().position(|r| *r == Refinement::Distill) {
            let before = stacked_configs(base, &stack[..pos], None)?;
            let (_, prev) = before.last().expect("baseline row");
            let tcfg = teacher_config(prev, &base.output_dir)?;
            if opts.verbose {
                eprintln!("training teacher {}", tcfg.model.depth);
            }
            teacher = Some(train_with_data(&tcfg, train_ds, val_ds, &train_opts)?.checkpoint);
        }
    }
    let configs = stacked_configs(base, stack, teacher.as_deref())?;
    let mut report = AblationReport {
        rows: Vec::with_capacity(configs.len()),
        teacher: teacher.clone(),
    };
    let mut prev: Option<&TrainConfig> = None;
    for (label, cfg) in &configs {
        if opts.verbose {
            eprintln!("== {label}");
        }
        let out = train_with_data(cfg, train_ds, val_ds, &train_opts)?;
        let last = out
            .metrics
            .final_epoch()
            .ok_or_else(|| Error::Config("training produced no epochs".into()))?;
        report.rows.push(AblationRow {
            label: label.clone(),
            changed: match prev {
                Some(p) => config_diff(p, cfg)?,
                None => Vec::new(),
            },
            epochs: out.metrics.epochs.len(),
            train_loss: last.train_loss,
            top1: last.val_top1,
            top5: last.val_top5,
            checkpoint: out.checkpoint,
        });
        prev = Some(cfg);
    }
    Ok(report)
}
