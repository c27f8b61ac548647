//! Learnable parameters and the store that owns them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Role of a parameter inside its layer. Only [`ParamKind::Weight`] of conv
/// and dense layers is eligible for weight decay under no-bias-decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    /// Working copy used by the forward pass. F16-tagged in fp16 mode.
    pub value: Tensor,
    /// F32 master copy, present only in fp16 mode.
    pub master: Option<Tensor>,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn decay_eligible(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    /// The tensor the optimizer updates: the master copy when one exists.
    pub fn update_target(&self) -> &Tensor {
        self.master.as_ref().unwrap_or(&self.value)
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        match self.grad.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                let t = Tensor::new(self.value.shape().to_vec(), g.to_vec())
                    .expect("gradient matches parameter shape");
                self.grad = Some(t);
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        value: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value,
            master: None,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Switches every parameter to an F16 working copy backed by an F32 master.
    pub fn enable_master_copies(&mut self) {
        for p in &mut self.params {
            if p.master.is_none() {
                let master = p.value.to_f32();
                p.value = master.to_f16();
                p.master = Some(master);
            }
        }
    }

    /// Re-derives working copies from masters after an update.
    pub fn refresh_working_copies(&mut self) {
        for p in &mut self.params {
            if let Some(m) = &p.master {
                p.value = m.to_f16();
            }
        }
    }

    /// Overwrites a parameter's value, keeping its master copy in sync.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        let value = value.to_f32();
        if p.master.is_some() {
            p.value = value.to_f16();
            p.master = Some(value);
        } else {
            p.value = value;
        }
        Ok(())
    }

    pub fn working_dtype(&self) -> DType {
        self.params
            .first()
            .map(|p| p.value.dtype())
            .unwrap_or(DType::F32)
    }
}
