//! Classification losses and target refinements: cross entropy against
//! dense targets, label smoothing, knowledge distillation and mixup.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// A probability vector over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution(Vec<f32>);

impl TargetDistribution {
    pub fn one_hot(label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut p = vec![0.0; classes];
        p[label] = 1.0;
        Ok(Self(p))
    }

    /// `1 - eps` on the true class and `eps / (K - 1)` elsewhere.
    pub fn smooth(label: usize, classes: usize, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing epsilon {eps} outside [0, 1)"
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(
                "label smoothing needs at least 2 classes".into(),
            ));
        }
        let mut t = Self::one_hot(label, classes)?;
        if eps > 0.0 {
            let off = (eps / (classes - 1) as f64) as f32;
            for (i, p) in t.0.iter_mut().enumerate() {
                *p = if i == label { (1.0 - eps) as f32 } else { off };
            }
        }
        Ok(t)
    }

    /// `lambda * a + (1 - lambda) * b`.
    pub fn mix(a: &Self, b: &Self, lambda: f64) -> Result<Self> {
        if a.0.len() != b.0.len() {
            return Err(Error::ShapeMismatch {
                op: "mix targets",
                left: vec![a.0.len()],
                right: vec![b.0.len()],
            });
        }
        let p =
            a.0.iter()
                .zip(&b.0)
                .map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32)
                .collect();
        Ok(Self(p))
    }

    pub fn from_probs(p: Vec<f32>) -> Result<Self> {
        let t = Self(p);
        if !t.is_valid() {
            return Err(Error::InvalidArgument(
                "target is not a probability distribution".into(),
            ));
        }
        Ok(t)
    }

    pub fn probs(&self) -> &[f32] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().map(|&v| v as f64).sum()
    }

    /// Non-negative entries summing to 1 within `1e-6`.
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0 && v.is_finite()) && (self.sum() - 1.0).abs() <= 1e-6
    }
}

/// Stacks targets into an `(N, K)` tensor.
pub fn targets_tensor(targets: &[TargetDistribution]) -> Result<Tensor> {
    let k = targets.first().map(|t| t.classes()).unwrap_or(0);
    if targets.iter().any(|t| t.classes() != k) {
        return Err(Error::InvalidArgument(
            "targets disagree on class count".into(),
        ));
    }
    let data = targets.iter().flat_map(|t| t.0.iter().copied()).collect();
    Tensor::new(vec![targets.len(), k], data)
}

fn rows_of(z: &Tensor) -> Result<usize> {
    match z.shape().last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(Error::InvalidShape {
            shape: z.shape().to_vec(),
            reason: "softmax over an empty axis".into(),
        }),
    }
}

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let k = rows_of(z)?;
    Tensor::new(z.shape().to_vec(), kernels::softmax_rows(z.data(), k))
}

/// Batch-mean `-sum_i target_i * log softmax(z)_i` for `(N, K)` logits.
pub fn cross_entropy(z: &Tensor, target: &Tensor) -> Result<f64> {
    check_logits(z, target)?;
    let k = rows_of(z)?;
    let n = z.numel() / k;
    let logp = kernels::log_softmax_rows(z.data(), k);
    let total: f64 = logp
        .iter()
        .zip(target.data())
        .map(|(&lp, &t)| {
            if t == 0.0 {
                0.0
            } else {
                -(t as f64) * lp as f64
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Analytic gradient of [`cross_entropy`]: `(softmax(z) - target) / N`.
pub fn cross_entropy_grad(z: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_logits(z, target)?;
    let k = rows_of(z)?;
    let n = (z.numel() / k) as f32;
    let p = kernels::softmax_rows(z.data(), k);
    let g = p
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) / n)
        .collect();
    Tensor::new(z.shape().to_vec(), g)
}

fn check_logits(z: &Tensor, target: &Tensor) -> Result<()> {
    if z.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: z.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if z.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("cross_entropy logits".into()));
    }
    Ok(())
}

/// Gap `log((K - 1)(1 - eps) / eps)` between the optimal true-class logit
/// and the others under label smoothing.
pub fn theoretical_gap(classes: usize, eps: f64) -> Result<f64> {
    if eps == 0.0 {
        return Err(Error::InfiniteGap);
    }
    let k = classes as f64;
    if classes < 2 || !(eps > 0.0 && eps <= (k - 1.0) / k) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {eps} outside (0, (K-1)/K] for K = {classes}"
        )));
    }
    // log(1 + d) with d = ((K - 1)(1 - eps) - eps) / eps, which vanishes
    // exactly at the uniform end of the range
    let d = ((k - 1.0 - k * eps) / eps).max(0.0);
    Ok(d.ln_1p())
}

/// Max logit minus the mean of the remaining `K - 1` logits.
pub fn empirical_gap(z: &[f32]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument(
            "gap needs at least 2 classes".into(),
        ));
    }
    let (imax, &max) =
        z.iter().enumerate().fold(
            (0, &z[0]),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| v as f64)
        .sum();
    Ok(max as f64 - rest / (z.len() - 1) as f64)
}

/// Per-row [`empirical_gap`] of an `(N, K)` logit batch.
pub fn empirical_gaps(z: &Tensor) -> Result<Vec<f64>> {
    let k = rows_of(z)?;
    z.data().chunks(k).map(empirical_gap).collect()
}

/// Teacher logits and softmax temperature for distillation.
#[derive(Clone, Debug)]
pub struct DistillContext {
    pub teacher_logits: Tensor,
    pub temperature: f64,
}

impl DistillContext {
    pub fn new(teacher_logits: Tensor, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if !teacher_logits.all_finite() {
            return Err(Error::NonFinite("teacher logits".into()));
        }
        Ok(Self {
            teacher_logits,
            temperature,
        })
    }

    /// `softmax(r / T)`, the soft target of the distillation term.
    pub fn soft_targets(&self) -> Result<Tensor> {
        let inv = 1.0 / self.temperature as f32;
        softmax(&self.teacher_logits.map(|v| v * inv))
    }
}

/// Records `CE(target, softmax(z)) + T^2 * CE(softmax(r/T), softmax(z/T))`
/// on the tape. Teacher logits enter as constants.
pub fn distill_loss(tape: &mut Tape, z: Var, target: &Tensor, ctx: &DistillContext) -> Result<Var> {
    if tape.value(z).shape() != ctx.teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: tape.value(z).shape().to_vec(),
            right: ctx.teacher_logits.shape().to_vec(),
        });
    }
    let t = ctx.temperature as f32;
    let hard = tape.soft_cross_entropy(z, target)?;
    let zt = tape.scale(z, 1.0 / t);
    let soft = tape.soft_cross_entropy(zt, &ctx.soft_targets()?)?;
    let soft = tape.scale(soft, t * t);
    tape.add(hard, soft)
}

/// Value of [`distill_loss`] without a tape.
pub fn distill_loss_value(z: &Tensor, target: &Tensor, ctx: &DistillContext) -> Result<f64> {
    if z.shape() != ctx.teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: z.shape().to_vec(),
            right: ctx.teacher_logits.shape().to_vec(),
        });
    }
    let t = ctx.temperature;
    let zt = z.map(|v| v / t as f32);
    Ok(cross_entropy(z, target)? + t * t * cross_entropy(&zt, &ctx.soft_targets()?)?)
}

#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub targets: Vec<TargetDistribution>,
    pub lambda: f64,
    /// Example `i` was mixed with example `partner[i]`.
    pub partner: Vec<usize>,
}

/// Mixes example `i` with `partner[i]` using weight `lambda` on `i`.
pub fn mixup_with(
    inputs: &Tensor,
    targets: &[TargetDistribution],
    lambda: f64,
    partner: &[usize],
) -> Result<MixedBatch> {
    let n = targets.len();
    if inputs.shape().first() != Some(&n) || partner.len() != n || partner.iter().any(|&j| j >= n) {
        return Err(Error::InvalidArgument(
            "mixup batch, targets and pairing disagree".into(),
        ));
    }
    let per = inputs.numel() / n.max(1);
    let x = inputs.data();
    let lam = lambda as f32;
    let mut out = vec![0.0; inputs.numel()];
    for (i, &j) in partner.iter().enumerate() {
        let (xi, xj) = (&x[i * per..(i + 1) * per], &x[j * per..(j + 1) * per]);
        for ((o, &a), &b) in out[i * per..(i + 1) * per].iter_mut().zip(xi).zip(xj) {
            *o = lam * a + (1.0 - lam) * b;
        }
    }
    let mixed = partner
        .iter()
        .enumerate()
        .map(|(i, &j)| TargetDistribution::mix(&targets[i], &targets[j], lambda))
        .collect::<Result<_>>()?;
    Ok(MixedBatch {
        inputs: Tensor::new(inputs.shape().to_vec(), out)?,
        targets: mixed,
        lambda,
        partner: partner.to_vec(),
    })
}

/// Draws `lambda ~ Beta(alpha, alpha)` and pairs the batch with a random
/// permutation of itself.
pub fn mixup<R: Rng + ?Sized>(
    inputs: &Tensor,
    targets: &[TargetDistribution],
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let lambda = sample_lambda(alpha, rng)?;
    let mut partner: Vec<usize> = (0..targets.len()).collect();
    partner.shuffle(rng);
    mixup_with(inputs, targets, lambda, &partner)
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}
