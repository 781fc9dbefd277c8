use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::Gradients;

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Named parameter tensors, their gradient buffers and optimizer slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    slots: BTreeMap<String, Tensor>,
    step: u64,
}

pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter name `{name}` must be non-empty [A-Za-z0-9_.-]"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Mutable access to a value. The shape must not change.
    pub fn value_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.params.get_mut(name).map(|p| p.value.data_mut())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        p.value.expect_same_shape(&grad)?;
        p.grad = grad;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// `grad += weight * g` for every gradient in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, weight: f32) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            p.value.expect_same_shape(g)?;
            for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += weight * v;
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn slot(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name)
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_slot(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(Error::InvalidArgument(format!("slot name `{name}`")));
        }
        self.slots.insert(name, value);
        Ok(())
    }

    /// Runs `f(value, grad, slot)` for every parameter, creating the slot
    /// `"{prefix}.{name}"` zero-filled on first use.
    pub(crate) fn for_each_with_slot(&mut self, prefix: &str, mut f: impl FnMut(&mut [f32], &[f32], &mut [f32])) {
        for (name, p) in self.params.iter_mut() {
            let slot = self
                .slots
                .entry(format!("{prefix}.{name}"))
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            f(p.value.data_mut(), p.grad.data(), slot.data_mut());
        }
    }
}
