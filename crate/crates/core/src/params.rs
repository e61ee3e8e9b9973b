//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Wiring(format!("duplicate parameter `{name}`")));
        }
        t.requires_grad = true;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Wraps every parameter in a fresh graph leaf.
    pub fn bind(&self, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let mut v = t.clone();
                    v.grad = None;
                    (n.clone(), Var::leaf(v, requires_grad))
                })
                .collect(),
        }
    }

    /// Adds the gradients found for `bound`'s leaves into each tensor's
    /// gradient buffer. Parameters the loss did not reach get zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (name, t) in self.entries.iter_mut() {
            let g = bound.vars.get(name).and_then(|v| grads.get(v));
            match g {
                Some(g) => t.accumulate_grad(g.data()),
                None => {
                    let n = t.numel();
                    t.grad.get_or_insert_with(|| vec![0.0; n]);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Parameters bound into one forward graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Wiring(format!("missing parameter `{name}`")))
    }

    pub fn get_opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).cloned()
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }
}
