//! Parameter initialization.
//!
//! Conv and dense weights are drawn uniformly from `[-a, a]` with
//! `a = sqrt(6 / (d_in + d_out))`, where `d_in`/`d_out` are the layer's
//! input and output channel counts (not fan-in/fan-out including the kernel
//! area). Biases and BN beta start at 0, BN gamma at 1, and zero-gamma sets
//! the gamma closing every block's path A to 0.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::RunningStats;
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitPolicy {
    pub zero_gamma: bool,
    pub seed: u64,
}

impl InitPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            zero_gamma: false,
            seed,
        }
    }

    pub fn with_zero_gamma(mut self, on: bool) -> Self {
        self.zero_gamma = on;
        self
    }
}

pub fn xavier_bound(d_in: usize, d_out: usize) -> f64 {
    (6.0 / (d_in + d_out) as f64).sqrt()
}

/// Draws `n` values uniformly from `[-a, a]`.
pub fn xavier_uniform<R: rand::Rng>(n: usize, d_in: usize, d_out: usize, rng: &mut R) -> Vec<f32> {
    let a = xavier_bound(d_in, d_out) as f32;
    let dist = Uniform::new_inclusive(-a, a).expect("finite positive bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn init_model(model: &mut Model, policy: &InitPolicy) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for l in model.graph.layers() {
        match l.kind {
            LayerKind::Conv | LayerKind::Dense => {
                let id = model.params.id(&format!("{}.weight", l.name))?;
                let shape = model.params.get(id).value.shape().to_vec();
                let n = shape.iter().product();
                let w = xavier_uniform(n, l.in_channels, l.out_channels, &mut rng);
                model.params.set_value(id, Tensor::new(shape, w)?)?;
                if l.kind == LayerKind::Dense {
                    let id = model.params.id(&format!("{}.bias", l.name))?;
                    model
                        .params
                        .set_value(id, Tensor::zeros(&[l.out_channels]))?;
                }
            }
            LayerKind::Bn => {
                let g = model.params.id(&format!("{}.gamma", l.name))?;
                let b = model.params.id(&format!("{}.beta", l.name))?;
                model
                    .params
                    .set_value(g, Tensor::full(&[l.out_channels], 1.0))?;
                model
                    .params
                    .set_value(b, Tensor::zeros(&[l.out_channels]))?;
                model
                    .bn_stats
                    .insert(l.name.clone(), RunningStats::new(l.out_channels));
            }
            _ => {}
        }
    }
    if policy.zero_gamma {
        let names: Vec<String> = model
            .graph
            .blocks
            .iter()
            .map(|b| b.summand_bn().name.clone())
            .collect();
        for name in names {
            let id = model.params.id(&format!("{name}.gamma"))?;
            let c = model.params.get(id).value.numel();
            model.params.set_value(id, Tensor::zeros(&[c]))?;
        }
    }
    if model.params.iter().any(|p| !p.value.all_finite()) {
        return Err(Error::NonFinite("initialized parameters".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds() {
        assert_eq!(xavier_bound(3, 3), 1.0);
        assert!((xavier_bound(100, 200) - 0.141_421_356_237_309_5).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = xavier_uniform(10_000, 3, 3, &mut rng);
        assert!(w.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
