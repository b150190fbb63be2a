//! Named parameter storage and tape binding.
//!
//! Every model keeps its tensors in a [`ParamStore`] under a stable dotted
//! namespace (`prelude.0.q`, `recurrent.down`, `lora.q.A`, `controller.head.3`,
//! `gate.W`, `stepnorm.12`, ...). Checkpoints, the optimizer and the freezing
//! audit all address tensors through these names.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) {
        self.params.insert(name.into(), Param { tensor, frozen });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel_where(&self, pred: impl Fn(&str, &Param<T>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| pred(k, p))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// 64-bit digest over a tensor's shape and bit pattern.
    pub fn fingerprint(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        let mut h = DefaultHasher::new();
        t.shape().hash(&mut h);
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.width());
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        bytes.hash(&mut h);
        Ok(h.finish())
    }

    /// Fingerprints of every frozen tensor, in store order.
    pub fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(k, _)| (k.clone(), self.fingerprint(k).expect("present")))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.all_finite())
    }
}

/// Lazily places store tensors on a tape as leaves. Trainable tensors are
/// recorded with `requires_grad` when gradient tracking is on; frozen tensors
/// never are.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: IndexMap<String, Var>,
    track_grads: bool,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track_grads: bool) -> Self {
        Self {
            store,
            vars: IndexMap::new(),
            track_grads,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.store.param(name)?;
        let v = tape.leaf(p.tensor.clone(), self.track_grads && !p.frozen);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collects leaf gradients by name. Frozen tensors are absent by construction.
    pub fn gradients(&self, grads: &Gradients<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
