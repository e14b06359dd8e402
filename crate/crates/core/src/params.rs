//! Named learnable parameters, their gradients, and non-learnable buffers.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Add `g` into the gradient slot of `name`. Frozen parameters are skipped.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        if self.is_frozen(name) {
            return Ok(());
        }
        let p = self.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        match self.grads.get_mut(name) {
            Some(slot) => {
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
        Ok(())
    }

    /// Force a gradient into a slot, bypassing the freeze filter.
    pub fn set_grad_unchecked(&mut self, name: &str, g: Tensor) {
        self.grads.insert(name.to_string(), g);
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }
}
