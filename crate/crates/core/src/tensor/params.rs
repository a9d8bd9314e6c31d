use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

/// A named entry in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    /// Covered by the L2 penalty.
    pub decay: bool,
    /// Updated by the optimiser. Non-trainable entries are buffers such as
    /// batch-norm running statistics.
    pub trainable: bool,
}

/// Parameters and buffers keyed by dot-separated path. Iteration is
/// lexicographic so anything derived from it (checkpoints, optimiser state,
/// penalty sums) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, param: Param<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), param);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> Result<()> {
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        self.insert(
            name,
            Param {
                tensor,
                decay,
                trainable: true,
            },
        )
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        self.insert(
            name,
            Param {
                tensor,
                decay: false,
                trainable: false,
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Trainable scalar count grouped by the first `depth` path components.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| p.trainable) {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += p.tensor.numel();
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Adds the gradients a graph computed for this store's parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (name, var) in graph.param_vars() {
            let Some(g) = graph.grad(var) else { continue };
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if let Some(acc) = p.tensor.grad_mut() {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    /// Converts every entry to another precision, keeping flags.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let t = p.tensor.cast::<U>();
                    let tensor = if p.trainable { t.with_grad() } else { t };
                    (
                        k.clone(),
                        Param {
                            tensor,
                            decay: p.decay,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// He-normal initialisation: zero mean, std = sqrt(2 / fan_in) with
/// fan_in = dims[1]·kh·kw.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = dims.iter().product();
    let data = (0..numel).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_vec(dims, data).expect("numel matches dims")
}
