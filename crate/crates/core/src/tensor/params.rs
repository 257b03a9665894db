use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which fixes every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(Arc::unwrap_or_clone)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

/// Binds parameters into a graph as leaves on first use and maps gradients
/// back to names after backward.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: HashMap<String, Var>,
}

fn frozen(_: &str) -> bool {
    false
}

impl<'a> ParamBinder<'a> {
    /// `trainable` decides which parameters become gradient-carrying leaves.
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        ParamBinder {
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Binder where nothing requires gradients (pure inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &frozen)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.shared(name)?;
        let v = g.leaf_shared(value, (self.trainable)(name))?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter (zeros when the loss did
    /// not depend on it).
    pub fn grads(&self, g: &Graph) -> Grads {
        let mut out = Grads::new();
        for (name, &v) in &self.bound {
            if g.requires_grad(v) {
                let grad = g
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                out.insert(name.clone(), grad);
            }
        }
        out
    }
}

/// `acc += scale * g`, inserting missing entries.
pub fn accumulate_grads(acc: &mut Grads, g: &Grads, scale: f64) {
    for (name, t) in g {
        match acc.get_mut(name) {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += scale * b),
            None => {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
                acc.insert(name.clone(), t);
            }
        }
    }
}

pub fn scale_grads(g: &mut Grads, scale: f64) {
    for t in g.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
}
