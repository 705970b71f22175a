use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Ids whose name starts with any of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::InvalidConfig(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                self.names[id.0],
                value.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Forward-pass context: a tape plus lazily bound parameters.
///
/// Parameters marked trainable are recorded as gradient-tracking leaves on
/// first use; all others enter the tape as constants.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &[ParamId]) -> Self {
        let mut flags = vec![false; store.len()];
        for id in trainable {
            flags[id.0] = true;
        }
        Self {
            tape: Tape::new(),
            store,
            trainable: flags,
            bound: vec![None; store.len()],
        }
    }

    /// Context in which nothing receives gradients.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, &[])
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.tape.leaf(value, self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Gradient for every requested parameter, zero for those the loss never touched.
    pub fn param_grads(&self, grads: &mut Gradients<T>, ids: &[ParamId]) -> Vec<Tensor<T>> {
        ids.iter()
            .map(|&id| match self.bound[id.0] {
                Some(v) => grads.take(v),
                None => Tensor::zeros(self.store.get(id).shape().to_vec()),
            })
            .collect()
    }
}
