use std::collections::HashMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Put every tensor on `tape`; those selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> BoundParams<'t> {
        let vars = self
            .iter()
            .map(|(name, t)| {
                if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    /// Panics on an unknown name: parameter names are fixed by the model.
    pub fn var(&self, name: &str) -> Var<'t> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients in parameter order (zeros for constants).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}
