//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    /// Buffers (running statistics) are persisted but never differentiated.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Entry { tensor, trainable: true });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Entry { tensor, trainable: false });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry<T>> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Places every entry on `tape`. Trainable entries become gradient
    /// leaves when `differentiable` is set; everything else is constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, differentiable: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let v = if differentiable && e.trainable {
                    tape.param(&e.tensor)
                } else {
                    tape.constant(e.tensor.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on one tape.
pub struct Bound<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// Substitutes the variable bound under `name`.
    pub fn set(&mut self, name: impl Into<String>, var: Var<'t, T>) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
