//! Nesterov accelerated gradient with parameter groups.
//!
//! Update rule, with weight decay folded into the gradient as L2:
//!
//! ```text
//! g <- g + wd * w
//! v <- mu * v + g
//! w <- w - lr * (g + mu * v)
//! ```

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub params: Vec<ParamId>,
    pub weight_decay: f32,
}

/// Splits the store into decay groups. With `no_bias_decay` the result is
/// exactly two groups: conv/dense weights with `weight_decay`, and every
/// bias and BN gamma/beta with zero decay. Otherwise a single group decays
/// everything.
pub fn param_groups(store: &ParamStore, weight_decay: f32, no_bias_decay: bool) -> Vec<ParamGroup> {
    if !no_bias_decay {
        return vec![ParamGroup {
            params: store.ids().collect(),
            weight_decay,
        }];
    }
    let (decay, no_decay): (Vec<ParamId>, Vec<ParamId>) =
        store.ids().partition(|&id| store.get(id).decay_eligible());
    vec![
        ParamGroup {
            params: decay,
            weight_decay,
        },
        ParamGroup {
            params: no_decay,
            weight_decay: 0.0,
        },
    ]
}

/// Ids of parameters that receive no weight decay under `groups`.
pub fn zero_decay_set(groups: &[ParamGroup]) -> BTreeSet<ParamId> {
    groups
        .iter()
        .filter(|g| g.weight_decay == 0.0)
        .flat_map(|g| g.params.iter().copied())
        .collect()
}

#[derive(Clone, Debug)]
pub struct Nag {
    pub momentum: f32,
    buffers: Vec<Option<Vec<f32>>>,
}

impl Nag {
    pub fn new(momentum: f32) -> Self {
        Self {
            momentum,
            buffers: Vec::new(),
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f32]> {
        self.buffers.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn set_buffer(&mut self, id: ParamId, v: Vec<f32>) {
        if self.buffers.len() <= id.0 {
            self.buffers.resize(id.0 + 1, None);
        }
        self.buffers[id.0] = Some(v);
    }

    /// One update over every parameter in `groups`. The master copy is
    /// updated when present; callers refresh working copies afterwards.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup], lr: f32) -> Result<()> {
        for g in groups {
            if let Some(&id) = g.params.iter().find(|&&id| store.get(id).grad.is_none()) {
                return Err(Error::MissingGradient(store.get(id).name.clone()));
            }
        }
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let mu = self.momentum;
        for g in groups {
            let wd = g.weight_decay;
            for &id in &g.params {
                let p = store.get_mut(id);
                let grad = p.grad.as_ref().expect("checked above").data().to_vec();
                let target = match p.master.as_mut() {
                    Some(m) => m,
                    None => &mut p.value,
                };
                let w = target.data_mut();
                let v = self.buffers[id.0].get_or_insert_with(|| vec![0.0; w.len()]);
                for i in 0..w.len() {
                    let gi = grad[i] + wd * w[i];
                    v[i] = mu * v[i] + gi;
                    w[i] -= lr * (gi + mu * v[i]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn store_with(kinds: &[(&str, ParamKind, f32)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, kind, v) in kinds {
            s.add(*name, *kind, Tensor::from_slice(&[*v])).unwrap();
        }
        s
    }

    #[test]
    fn hand_simulated_single_step() {
        let mut s = store_with(&[("w", ParamKind::Weight, 1.0)]);
        s.get_mut(ParamId(0)).grad = Some(Tensor::from_slice(&[1.0]));
        let groups = param_groups(&s, 0.0, false);
        Nag::new(0.9).step(&mut s, &groups, 0.1).unwrap();
        let w = s.get(ParamId(0)).value.data()[0];
        assert!((w - 0.81).abs() < 1e-7, "{w}");
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let mut s = store_with(&[("w", ParamKind::Weight, 2.0)]);
        let groups = param_groups(&s, 0.0, false);
        let mut opt = Nag::new(0.0);
        let mut w = 2.0f32;
        for g in [0.5f32, -1.25, 3.0] {
            s.get_mut(ParamId(0)).grad = Some(Tensor::from_slice(&[g]));
            opt.step(&mut s, &groups, 0.05).unwrap();
            w -= 0.05 * g;
            assert_eq!(s.get(ParamId(0)).value.data()[0], w);
        }
    }

    #[test]
    fn no_bias_decay_partition() {
        let s = store_with(&[
            ("conv.weight", ParamKind::Weight, 1.0),
            ("bn.gamma", ParamKind::BnGamma, 1.0),
            ("bn.beta", ParamKind::BnBeta, 0.0),
            ("fc.weight", ParamKind::Weight, 1.0),
            ("fc.bias", ParamKind::Bias, 0.0),
        ]);
        let groups = param_groups(&s, 1e-4, true);
        assert_eq!(groups.len(), 2);
        let zero: Vec<_> = zero_decay_set(&groups).into_iter().map(|id| id.0).collect();
        assert_eq!(zero, vec![1, 2, 4]);
        assert!(zero_decay_set(&param_groups(&s, 1e-4, false)).is_empty());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store_with(&[("a", ParamKind::Weight, 1.0), ("b", ParamKind::Bias, 1.0)]);
        s.get_mut(ParamId(0)).grad = Some(Tensor::from_slice(&[1.0]));
        let groups = param_groups(&s, 0.0, false);
        match Nag::new(0.9).step(&mut s, &groups, 0.1) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        // nothing moved
        assert_eq!(s.get(ParamId(0)).value.data()[0], 1.0);
    }
}
