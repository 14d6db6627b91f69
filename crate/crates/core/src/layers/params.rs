use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor. Non-trainable entries are buffers such as batch-norm
/// running statistics: serialized, but not counted or optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Puts every parameter on `g`. With `track`, trainable parameters are
    /// gradient-tracked leaves; everything else enters as a constant.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track && p.trainable {
                    g.variable(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Adds the tape gradients of a tracked binding into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Replaces tensor values by name from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::config(format!("missing parameter {}", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, stored {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// Graph variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding from externally created variables, one per store entry.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
