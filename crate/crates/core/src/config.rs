//! Run configuration, read from JSON. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::BnConfig;
use crate::data::transform::{AugmentConfig, EvalConfig};
use crate::data::{cifar, Dataset};
use crate::error::{Error, Result};
use crate::model::{Depth, Variant};
use crate::precision::PrecisionPolicy;
use crate::schedule::{scaled_lr, Decay};

pub const ENV_SEED: &str = "TRICKS_SEED";
pub const ENV_DATA_DIR: &str = "TRICKS_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub precision: PrecisionPolicy,
    #[serde(default)]
    pub bn: BnConfig,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: Depth,
    pub variant: Variant,
    pub classes: usize,
    /// Defaults to 32 for desk presets and 224 otherwise.
    #[serde(default)]
    pub input_size: Option<usize>,
}

impl ModelConfig {
    pub fn input_size(&self) -> usize {
        self.input_size
            .unwrap_or(if self.depth.is_desk() { 32 } else { 224 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with the CIFAR-10 binary batches.
    Cifar10 { root: PathBuf },
    /// Directory with `train/<class>/*` and `val/<class>/*`.
    ImageDir { root: PathBuf },
    /// Generated class-conditional images.
    Synthetic {
        train: usize,
        val: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub val_limit: Option<usize>,
    /// Overrides the preset chosen from the model depth.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    /// Where to cache the color PCA basis estimated from the training set.
    /// Without it the fixed default basis is used.
    #[serde(default)]
    pub pca_cache: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub zero_gamma: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    pub no_bias_decay: bool,
    /// Defaults to `0.1 * batch_size / 256`.
    pub base_lr: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            no_bias_decay: false,
            base_lr: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    #[default]
    Step,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: DecayKind,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: DecayKind::Step,
            warmup_epochs: 5,
            milestones: vec![30, 60, 90],
            factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn decay(&self) -> Decay {
        match self.kind {
            DecayKind::Step => Decay::Step {
                milestones: self.milestones.clone(),
                factor: self.factor,
            },
            DecayKind::Cosine => Decay::Cosine,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    /// Beta parameter for mixup; `None` disables mixup.
    pub mixup_alpha: Option<f64>,
    /// Epoch count when mixup is on; defaults to `ceil(epochs * 5 / 3)`.
    pub mixup_epochs: Option<usize>,
    pub distill: Option<DistillConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher_checkpoint: PathBuf,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    20.0
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file, resolves relative paths against its directory,
    /// applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        match &mut self.data.source {
            DataSource::Cifar10 { root } | DataSource::ImageDir { root } => resolve(base, root),
            DataSource::Synthetic { .. } => {}
        }
        if let Some(p) = self.data.pca_cache.as_mut() {
            resolve(base, p);
        }
        if let Some(d) = self.loss.distill.as_mut() {
            resolve(base, &mut d.teacher_checkpoint);
        }
        resolve(base, &mut self.output_dir);
    }

    /// `TRICKS_SEED` replaces the seed; `TRICKS_DATA_DIR` replaces the
    /// dataset root.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{ENV_SEED}={v:?} is not an unsigned integer"))
            })?;
        }
        if let Some(dir) = std::env::var_os(ENV_DATA_DIR) {
            match &mut self.data.source {
                DataSource::Cifar10 { root } | DataSource::ImageDir { root } => {
                    *root = PathBuf::from(dir)
                }
                DataSource::Synthetic { .. } => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.model.classes < 1 {
            return bad("model.classes must be >= 1".into());
        }
        crate::model::build_resnet(
            self.model.depth,
            self.model.variant,
            self.model.classes,
            self.model.input_size(),
        )?;
        match &self.data.source {
            DataSource::Cifar10 { root } => {
                for f in cifar::TRAIN_FILES.iter().chain([&cifar::TEST_FILE]) {
                    if !root.join(f).is_file() {
                        return bad(format!("missing CIFAR-10 file {}", root.join(f).display()));
                    }
                }
            }
            DataSource::ImageDir { root } => {
                for split in ["train", "val"] {
                    if !root.join(split).is_dir() {
                        return bad(format!(
                            "missing image directory {}",
                            root.join(split).display()
                        ));
                    }
                }
            }
            DataSource::Synthetic { train, size, .. } => {
                if *train == 0 || *size == 0 {
                    return bad("synthetic data needs train > 0 and size > 0".into());
                }
            }
        }
        self.augment_config().validate()?;
        let ls = self.loss.label_smoothing;
        if !(0.0..1.0).contains(&ls) {
            return bad(format!("loss.label_smoothing must lie in [0, 1), got {ls}"));
        }
        if ls > 0.0 && self.model.classes < 2 {
            return bad("label smoothing needs at least 2 classes".into());
        }
        if let Some(a) = self.loss.mixup_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("loss.mixup_alpha must be > 0, got {a}"));
            }
        }
        if self.loss.mixup_epochs == Some(0) {
            return bad("loss.mixup_epochs must be >= 1".into());
        }
        if let Some(d) = &self.loss.distill {
            if !(d.temperature > 0.0 && d.temperature.is_finite()) {
                return bad(format!(
                    "loss.distill.temperature must be > 0, got {}",
                    d.temperature
                ));
            }
            if !d.teacher_checkpoint.is_file() {
                return bad(format!(
                    "teacher checkpoint {} does not exist",
                    d.teacher_checkpoint.display()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.optim.momentum)
            || self.optim.weight_decay.is_nan()
            || self.optim.weight_decay < 0.0
        {
            return bad(
                "optim.momentum must lie in [0, 1) and optim.weight_decay must be >= 0".into(),
            );
        }
        if let Some(lr) = self.optim.base_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("optim.base_lr must be > 0, got {lr}"));
            }
        }
        if self.schedule.factor <= 0.0 {
            return bad("schedule.factor must be > 0".into());
        }
        if self.bn.eps.is_nan() || self.bn.eps <= 0.0 || !(0.0..1.0).contains(&self.bn.momentum) {
            return bad("bn.eps must be > 0 and bn.momentum in [0, 1)".into());
        }
        self.precision.validate()
    }

    pub fn mixup_enabled(&self) -> bool {
        self.loss.mixup_alpha.is_some()
    }

    /// Epochs actually run: mixup stretches training unless overridden.
    pub fn effective_epochs(&self) -> usize {
        if self.mixup_enabled() {
            self.loss
                .mixup_epochs
                .unwrap_or((self.epochs * 5).div_ceil(3))
        } else {
            self.epochs
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.optim
            .base_lr
            .unwrap_or_else(|| scaled_lr(self.batch_size))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        self.data.augment.clone().unwrap_or_else(|| {
            let s = self.model.input_size();
            if self.model.depth.is_desk() {
                AugmentConfig::desk(s)
            } else {
                AugmentConfig::imagenet(s)
            }
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        self.data.eval.clone().unwrap_or_else(|| {
            if self.model.depth.is_desk() {
                EvalConfig::desk()
            } else {
                EvalConfig::imagenet()
            }
        })
    }

    /// Loads `(train, val)` and checks the class count against the model.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = match &self.data.source {
            DataSource::Cifar10 { root } => cifar::load_dir(root)?,
            DataSource::ImageDir { root } => (
                crate::data::image_dir::load(&root.join("train"))?,
                crate::data::image_dir::load(&root.join("val"))?,
            ),
            DataSource::Synthetic {
                train,
                val,
                size,
                seed,
            } => crate::data::synthetic::split(*train, *val, self.model.classes, *size, *seed),
        };
        for (name, ds) in [("train", &train), ("val", &val)] {
            if ds.num_classes != self.model.classes {
                return Err(Error::Config(format!(
                    "{name} data has {} classes but model.classes is {}",
                    ds.num_classes, self.model.classes
                )));
            }
        }
        Ok((
            train.truncated(self.data.train_limit),
            val.truncated(self.data.val_limit),
        ))
    }
}
