//! Named parameter storage and per-tape binding.
//!
//! Names are dot-separated; the first component is the namespace:
//! `model` (frozen backbone), `adapter` (regular adapters), `hyper`
//! (hypernetwork encoder and decoder) and `infini` (memory injection gates).

use std::collections::BTreeMap;

use qfsum_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const BACKBONE: &str = "model";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.numel_where(|_| true)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: &dyn Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// True for everything outside the frozen backbone.
pub fn is_adapter_param(name: &str) -> bool {
    !is_backbone_param(name)
}

pub fn is_backbone_param(name: &str) -> bool {
    name.split('.').next() == Some(BACKBONE)
}

/// A [`ParamStore`] recorded on one tape.
#[derive(Debug)]
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Replace or add one binding (used to route external variables, such
    /// as finite-difference probes, into a forward pass).
    pub fn insert(&mut self, name: impl Into<String>, v: Var<'t, T>) {
        self.vars.insert(name.into(), v);
    }

    pub fn opt(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}
