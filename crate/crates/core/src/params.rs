//! Named parameter arrays in a fixed registration order.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// An ordered collection of named tensors. Iteration order is the order of
/// registration, which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::contract(format!("unknown parameter `{name}`"))),
        }
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> ParamVars<'a> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ParamVars { set: self, vars }
    }
}

/// Tape handles of a bound [`ParamSet`], in registration order.
#[derive(Debug)]
pub struct ParamVars<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> ParamVars<'a> {
    /// Pairs `set` with handles already recorded on a tape, one per
    /// parameter in registration order.
    pub fn from_vars(set: &'a ParamSet, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != set.len() {
            return Err(Error::contract(format!("{} handles for {} parameters", vars.len(), set.len())));
        }
        Ok(ParamVars { set, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform `[-a, a]` with `a = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, a, rng)
}

pub(crate) fn uniform(shape: &[usize], a: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
