//! Named parameter storage and per-graph binding.

use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.requires_grad = on);
    }
}

/// Lazily binds parameters from a store into one graph. Each parameter is
/// inserted at most once, so reuse across layers accumulates gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Binder<'a> {
    /// `track` decides whether bound parameters receive gradients.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn var(&mut self, g: &mut Graph<'a>, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = &self.store.tensors[i];
        let v = if self.track { g.param(t) } else { g.frozen(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Indices of parameters touched so far.
    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|_| i))
    }

    /// Gradients by parameter index; untouched parameters get `None`.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
