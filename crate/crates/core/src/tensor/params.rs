use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// A named model weight. Frozen weights never receive a gradient buffer and
/// are skipped by the optimiser and by gradient checks.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, frozen: bool) -> Result<ParamId> {
        if self.names.contains_key(name) || self.buffer_names.contains_key(name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.names.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            frozen,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<BufferId> {
        if self.names.contains_key(name) || self.buffer_names.contains_key(name) {
            return Err(Error::config(name, "duplicate buffer name"));
        }
        self.buffer_names.insert(name.to_string(), self.buffers.len());
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).copied().map(BufferId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer; no-op when frozen.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a += b),
            None => p.grad = Some(Tensor::new(p.value.shape(), grad.to_vec()).expect("grad shape")),
        }
    }
}
