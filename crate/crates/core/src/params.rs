//! Named parameter maps and their binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::grad::{Graph, Real, Tensor, Var};
use crate::rng::Rng;

/// Ordered name → tensor map. A tensor whose `requires_grad` is false is
/// frozen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total element count of tensors whose name passes `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn numel(&self) -> usize {
        self.count(|_| true)
    }

    /// Set the frozen flag of every tensor whose name passes `filter`.
    pub fn set_trainable(&mut self, filter: impl Fn(&str) -> bool, trainable: bool) {
        for (name, t) in self.iter_mut() {
            if filter(name) {
                t.requires_grad = trainable;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Merge `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter name {k}")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Add every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        self.bind_where(g, |_| true)
    }

    pub fn bind_where(&self, g: &mut Graph<T>, filter: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(n, t)| (n.to_string(), g.leaf(t.clone())))
            .collect();
        Bindings { vars }
    }
}

/// Parameter name → graph variable.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collect gradients after `backward`, keyed by name; frozen tensors
    /// are absent.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|d| (k.clone(), d.to_vec())))
            .collect()
    }
}

pub(crate) fn trunc_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.trunc_normal(std) as f32).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("length matches shape")
        .with_grad(true)
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).with_grad(true)
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape.to_vec(), 1.0).with_grad(true)
}
