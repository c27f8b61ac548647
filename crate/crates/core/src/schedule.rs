//! Learning-rate schedules: linear warmup followed by step or cosine decay.
//!
//! Batches are counted from 1. Warmup covers batches `1..=m` with
//! `lr = t * eta / m`; decay sees the post-warmup index `s = t - m - 1`, so
//! the first decayed batch runs at `eta` and the cosine reaches 0 at `s = T`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear scaling rule: `0.1 * batch_size / 256`.
pub fn scaled_lr(batch_size: usize) -> f64 {
    0.1 * batch_size as f64 / 256.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decay {
    /// Multiply by `factor` at each milestone, counted in completed epochs
    /// since the start of training.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_batches: usize,
    /// Number of post-warmup batches (`T`).
    pub decay_batches: usize,
    pub batches_per_epoch: usize,
    pub decay: Decay,
}

impl Schedule {
    /// Schedule for `epochs` epochs of `batches_per_epoch` batches with
    /// `warmup_epochs` of warmup.
    pub fn for_run(
        base_lr: f64,
        epochs: usize,
        warmup_epochs: usize,
        batches_per_epoch: usize,
        decay: Decay,
    ) -> Self {
        let warmup_batches = warmup_epochs.min(epochs) * batches_per_epoch;
        Self {
            base_lr,
            warmup_batches,
            decay_batches: epochs * batches_per_epoch - warmup_batches,
            batches_per_epoch,
            decay,
        }
    }

    /// Learning rate for global batch `t` (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        let t = t.max(1);
        let m = self.warmup_batches;
        if t <= m {
            return t as f64 * self.base_lr / m as f64;
        }
        match &self.decay {
            Decay::Cosine => self.decayed_lr(t - m - 1),
            Decay::Step { .. } => {
                let epoch = (t - 1) / self.batches_per_epoch.max(1);
                self.step_lr(epoch)
            }
        }
    }

    /// Decay-phase rate at post-warmup batch index `s`. For step decay `s`
    /// is converted back to an absolute epoch.
    pub fn decayed_lr(&self, s: usize) -> f64 {
        match &self.decay {
            Decay::Cosine => {
                if self.decay_batches == 0 {
                    return self.base_lr;
                }
                let s = s.min(self.decay_batches) as f64;
                let v = 0.5 * (1.0 + (s * PI / self.decay_batches as f64).cos()) * self.base_lr;
                v.max(0.0)
            }
            Decay::Step { .. } => {
                let epoch = (self.warmup_batches + s) / self.batches_per_epoch.max(1);
                self.step_lr(epoch)
            }
        }
    }

    /// Step-decay rate after `epoch` completed epochs.
    pub fn step_lr(&self, epoch: usize) -> f64 {
        match &self.decay {
            Decay::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * factor.powi(passed as i32)
            }
            Decay::Cosine => self.base_lr,
        }
    }

    pub fn total_batches(&self) -> usize {
        self.warmup_batches + self.decay_batches
    }

    /// `(batch, lr)` rows for every batch of the run.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        (1..=self.total_batches())
            .map(|t| (t, self.lr_at(t)))
            .collect()
    }
}
