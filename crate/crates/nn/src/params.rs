use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Gradients, Graph, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Array2<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    /// Insert a tensor drawn from `U(-bound, bound)`.
    pub fn insert_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: (usize, usize), bound: f64, rng: &mut R) {
        let value = Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-bound..bound)));
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout<U: Float>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Params(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::Params(format!("missing tensor `{name}`"))),
                Some(o) if o.dim() != t.dim() => {
                    return Err(Error::Params(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        o.dim(),
                        t.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Place every tensor on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect(),
        }
    }

    /// Place every tensor on the graph as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Handle for `name`; panics if the model asks for a tensor it never created.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("no parameter named `{name}`"),
        }
    }

    /// Gradients per parameter name. Parameters the loss never reached get zeros.
    pub fn gradients<T: Float>(&self, grads: &Gradients<T>, params: &ParamSet<T>) -> BTreeMap<String, Array2<T>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = match grads.get(*v) {
                    Some(g) => g.clone(),
                    None => Array2::zeros(params.get(name).expect("bound from this set").dim()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
