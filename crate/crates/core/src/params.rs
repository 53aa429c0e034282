//! Named trainable parameters, their gradients, and non-trainable buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// Which half of the bi-level problem a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weights,
    Architecture,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
    names: HashMap<String, ParamId>,
    buffer_names: HashMap<String, BufferId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        self.params.push(Param {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
            group,
        });
        id
    }

    /// He-normal initialisation for a convolution kernel `[Cout, Cin, kt, kh, kw]`.
    pub fn add_conv_kernel(&mut self, name: impl Into<String>, shape: [usize; 5], rng: &mut impl Rng) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let value = Tensor::from_fn(&shape, |_| normal.sample(rng));
        self.add(name, value, ParamGroup::Weights)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_names.contains_key(&name), "duplicate buffer `{name}`");
        let id = BufferId(self.buffers.len());
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push((name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|id| self.get(*id).group == group).collect()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    /// Total scalar count of one parameter group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Overwrite a parameter or buffer by name (checkpoint restore).
    pub fn load_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(id) = self.names.get(name) {
            &mut self.params[id.0].value
        } else if let Some(id) = self.buffer_names.get(name) {
            &mut self.buffers[id.0].1
        } else {
            return Err(Error::parse("checkpoint", format!("unknown array `{name}`")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?} in the model but {:?} in the checkpoint",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn has_name(&self, name: &str) -> bool {
        self.names.contains_key(name) || self.buffer_names.contains_key(name)
    }
}
