use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TabiiError};
use crate::tensor::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

/// Named parameter collection owned by a model. Ids are dense indices in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TabiiError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Matrix::zeros(r, c),
            trainable,
        });
        self.index.insert(name, id);
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

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Add gradients produced by a backward pass into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.by_param {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copy every parameter whose name exists in `other` (shapes must match).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(TabiiError::shape(
                        "copy_values_from",
                        format!("parameter `{}` shape differs", p.name),
                    ));
                }
                p.value = src.clone();
            }
        }
        Ok(())
    }
}

/// Parameter gradients from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.by_param.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}
