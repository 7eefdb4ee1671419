//! Named parameter storage shared by the tokenizer embedding and the model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Registration order is stable, which
/// makes parameter count and serialization layout deterministic in the config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records the parameter on `g` (once per graph).
    pub fn var(&self, g: &Graph, id: ParamId) -> Var {
        g.param(id.0, &self.tensors[id.0])
    }

    /// Replaces every tensor, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!("parameter {i} is `{name}`, expected `{}`", self.names[i])));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Gaussian initializer.
pub(crate) fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Weight matrix `[fan_in × fan_out]` with std `gain / sqrt(fan_in)`.
pub(crate) fn dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    normal(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt())
}
