//! Named parameter storage with frozen/trainable flags.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// One stored weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub frozen: bool,
}

/// All weights of a model, keyed by dotted name (`anchor.blocks.0.attn.wq`).
///
/// Iteration is in name order, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        self.params.insert(name, Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Moves every entry of `other` into `self`; name clashes are errors.
    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.tensor, p.frozen)?;
        }
        Ok(())
    }

    /// Copies out the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over the names and little-endian data of every tensor whose
    /// name starts with one of `prefixes`, in name order.
    pub fn sha256(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                h.update(name.as_bytes());
                h.update(p.tensor.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolves parameter names to graph leaves, creating each at most once.
///
/// A leaf tracks gradients only when its name is in the trainable set; the
/// store's own frozen flag vetoes tracking regardless.
pub struct Binder<'a, T: Scalar = f32> {
    store: &'a ParameterStore,
    trainable: Option<&'a std::collections::BTreeSet<String>>,
    bound: BTreeMap<String, Var>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Binder whose leaves never track gradients (inference).
    pub fn frozen(store: &'a ParameterStore) -> Self {
        Binder {
            store,
            trainable: None,
            bound: BTreeMap::new(),
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn training(store: &'a ParameterStore, trainable: &'a std::collections::BTreeSet<String>) -> Self {
        Binder {
            store,
            trainable: Some(trainable),
            bound: BTreeMap::new(),
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        let track = !p.frozen && self.trainable.is_some_and(|t| t.contains(name));
        let v = g.leaf(p.tensor.cast::<T>(), track);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` to an existing graph value instead of the stored
    /// tensor; used to differentiate with respect to weights directly.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Bound leaves, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}
