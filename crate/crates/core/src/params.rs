//! Named parameter storage and initialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, Tensor};

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws a `fan_in × fan_out` matrix uniformly within the Glorot bound.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Ordered map of named parameter tensors shared with graphs by reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor>, DiffError> {
        self.get(name).ok_or_else(|| DiffError::UnknownName(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Mutable access; clones the tensor if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    /// Registers `name` in `g` as a trainable leaf, or as a constant when frozen.
    pub fn register(&self, g: &mut Graph, name: &str, frozen: bool) -> Result<NodeId, DiffError> {
        let value = Arc::clone(self.require(name)?);
        if frozen {
            Ok(g.constant_shared(value))
        } else {
            g.param(name, value)
        }
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), Arc::clone(v));
        }
    }
}
