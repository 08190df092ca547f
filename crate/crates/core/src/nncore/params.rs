use indexmap::IndexMap;

use crate::error::{CoreError, Result};
use crate::nncore::real::Real;
use crate::nncore::tensor::Tensor2D;

/// Read access to named tensors; implemented by [`ParamStore`] (trainable)
/// and by frozen weight containers that carry no gradient slots.
pub trait TensorLookup<R> {
    fn tensor(&self, name: &str) -> Result<&Tensor2D<R>>;
}

impl<R: Real> TensorLookup<R> for ParamStore<R> {
    fn tensor(&self, name: &str) -> Result<&Tensor2D<R>> {
        self.get(name)
    }
}

/// Named parameter tensors, each with a gradient accumulator of the same
/// shape. Iteration order is insertion order, which keeps optimiser updates
/// and checkpoints deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<R> {
    entries: IndexMap<String, ParamEntry<R>>,
}

#[derive(Debug, Clone)]
struct ParamEntry<R> {
    value: Tensor2D<R>,
    grad: Tensor2D<R>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor2D<R>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::Config(format!("duplicate parameter \"{name}\"")));
        }
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D<R>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter \"{name}\"")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D<R>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter \"{name}\"")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2D<R>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter \"{name}\"")))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2D<R>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter \"{name}\"")))?;
        if entry.grad.shape() != delta.shape() {
            return Err(CoreError::DimMismatch {
                op: "accumulate_grad",
                left: format!("{:?}", entry.grad.shape()),
                right: format!("{:?}", delta.shape()),
            });
        }
        entry.grad.add_assign(delta);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            let (r, c) = entry.grad.shape();
            entry.grad = Tensor2D::zeros(r, c);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D<R>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    /// Paired (value, grad) mutable access for optimiser steps.
    pub fn iter_mut_with_grad(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor2D<R>, &Tensor2D<R>)> {
        self.entries
            .iter_mut()
            .map(|(n, e)| (n.as_str(), &mut e.value, &e.grad))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.value.rows() * e.value.cols())
            .sum()
    }

    pub fn convert<S: Real>(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            let value = Tensor2D::new(
                entry.value.rows(),
                entry.value.cols(),
                entry.value.data().iter().map(|&v| S::from_f64(v.to_f64())).collect(),
            )
            .expect("shape preserved");
            out.insert(name, value).expect("names already unique");
        }
        out
    }
}
