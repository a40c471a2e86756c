//! Named parameter storage and gradient containers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Parameters kept in lexicographic name order, which is also the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        let (names, tensors) = map.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map(ParamId)
            .map_err(|_| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).ok().map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]. `None` marks a parameter the loss never reached.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `scale · other` into `self`.
    pub fn merge_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let mut g = g.clone();
                g.scale_assign(scale);
                self.accumulate(ParamId(i), &g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}
