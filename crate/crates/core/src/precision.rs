//! Emulated half-precision training.
//!
//! Parameters and activations are rounded to IEEE-754 binary16 while all
//! arithmetic runs in `f32`. Each parameter keeps an `f32` master copy that
//! receives the optimizer update; the loss is multiplied by a static scale
//! before backward and gradients are divided by it before the update.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Nag, ParamGroup};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

/// Nearest binary16 value under round-to-nearest-even, widened back to `f32`.
pub fn round_f16(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

pub fn encode_f16(x: f32) -> u16 {
    f16::from_f32(x).to_bits()
}

pub fn decode_f16(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// Distance from `x` to the next binary16 value of larger magnitude.
pub fn f16_ulp(x: f32) -> f32 {
    let h = f16::from_bits(f16::from_f32(x).to_bits() & 0x7fff);
    let next = f16::from_bits(h.to_bits() + 1);
    next.to_f32() - h.to_f32()
}

/// Quantizes a tensor to binary16, rejecting values that overflow to infinity.
pub fn quantize_f16(x: &Tensor) -> Result<Tensor> {
    let q = x.to_f16();
    if let Some(pos) = q.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "binary16 overflow at element {pos} (value {})",
            x.data()[pos]
        )));
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    #[default]
    Fp32,
    #[serde(rename = "fp16")]
    Fp16Emulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPolicy {
    #[serde(default)]
    pub mode: PrecisionMode,
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f32,
}

fn default_loss_scale() -> f32 {
    128.0
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self {
            mode: PrecisionMode::Fp32,
            loss_scale: default_loss_scale(),
        }
    }
}

impl PrecisionPolicy {
    pub fn fp32() -> Self {
        Self {
            mode: PrecisionMode::Fp32,
            loss_scale: 1.0,
        }
    }

    pub fn fp16(loss_scale: f32) -> Self {
        Self {
            mode: PrecisionMode::Fp16Emulated,
            loss_scale,
        }
    }

    pub fn is_fp16(&self) -> bool {
        self.mode == PrecisionMode::Fp16Emulated
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_scale >= 1.0 && self.loss_scale.is_finite()) {
            return Err(Error::Config(format!(
                "precision.loss_scale must be a finite value >= 1, got {}",
                self.loss_scale
            )));
        }
        Ok(())
    }

    /// Scale applied to the loss before backward; 1 in fp32 mode.
    pub fn backward_seed(&self) -> f32 {
        if self.is_fp16() {
            self.loss_scale
        } else {
            1.0
        }
    }

    /// Puts a store into the layout this policy expects.
    pub fn prepare(&self, store: &mut ParamStore) {
        if self.is_fp16() {
            store.enable_master_copies();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients were non-finite after unscaling; no parameter changed.
    Skipped,
}

/// Divides accumulated gradients by the loss scale (rounding them to
/// binary16 first in fp16 mode) and reports whether all are finite.
pub fn unscale_gradients(store: &mut ParamStore, policy: &PrecisionPolicy) -> bool {
    let inv = 1.0 / policy.backward_seed();
    let mut finite = true;
    for p in store.iter_mut() {
        if let Some(g) = p.grad.as_mut() {
            for v in g.data_mut() {
                let stored = if policy.is_fp16() { round_f16(*v) } else { *v };
                *v = stored * inv;
                finite &= v.is_finite();
            }
        }
    }
    finite
}

/// Unscales gradients and applies the NAG update to the master copies,
/// then refreshes the binary16 working copies. In fp16 mode non-finite
/// gradients skip the step entirely; fp32 applies them as plain training
/// would, leaving the divergence to surface in the loss.
pub fn apply_update(
    store: &mut ParamStore,
    optimizer: &mut Nag,
    groups: &[ParamGroup],
    lr: f32,
    policy: &PrecisionPolicy,
) -> Result<StepOutcome> {
    if !unscale_gradients(store, policy) && policy.is_fp16() {
        return Ok(StepOutcome::Skipped);
    }
    optimizer.step(store, groups, lr)?;
    if policy.is_fp16() {
        store.refresh_working_copies();
    }
    Ok(StepOutcome::Applied)
}
