//! Named learnable tensors.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        value.requires_grad = true;
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != value.shape() {
            return Err(Error::Data(format!(
                "parameter {name} has shape {:?}, checkpoint has {:?}",
                t.shape(),
                value.shape()
            )));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}
