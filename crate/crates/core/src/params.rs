//! Named, ordered parameter collections and their initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace every tensor with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::invalid("load_params", "parameter names differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("load_params", dst.shape(), src.shape()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Record every tensor as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameters of one store recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

impl<'t, T> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = num_traits::Float::sqrt(1.0 / fan_in as f64);
        let t = self.rng.uniform_tensor(shape, -bound, bound);
        let n = self.full_name(name);
        self.store.push(n, t)
    }

    /// Uniform with the variance-preserving bound for a leaky relu of
    /// negative slope `slope`: `sqrt(6 / ((1 + slope²) fan_in))`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, slope: f64) -> ParamId {
        let bound = num_traits::Float::sqrt(6.0 / ((1.0 + slope * slope) * fan_in as f64));
        let t = self.rng.uniform_tensor(shape, -bound, bound);
        let n = self.full_name(name);
        self.store.push(n, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.push(n, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.push(n, Tensor::full(shape, T::from_f64(v)))
    }
}
