//! Named parameter storage with gradient slots.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Vec<f64>,
}

/// All learnable tensors, keyed by a stable dotted name.
///
/// Iteration is lexicographic by name, so every sweep over the store
/// (optimizer updates, gradient merges, checkpoint writes) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = vec![0.0; value.numel()];
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    /// Registers a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("{name}: {:?} -> {:?}", slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.slots
            .get_mut(name)
            .map(|s| s.value.data_mut())
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.slots
            .get(name)
            .map(|s| s.grad.as_slice())
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// `(name, value, grad)` in name order, for optimizer sweeps.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &[f64])> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, s.grad.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `weight * grads` into the gradient slots, in name order.
    pub fn accumulate(&mut self, grads: &Gradients, weight: f64) -> Result<()> {
        for (name, g) in &grads.0 {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if g.len() != slot.grad.len() {
                return Err(Error::shape("accumulate", name.clone()));
            }
            for (dst, src) in slot.grad.iter_mut().zip(g) {
                *dst += weight * src;
            }
        }
        Ok(())
    }

    /// Zeroes every slot, then writes `grads`; unreachable parameters end at zero.
    pub fn assign_grads(&mut self, grads: &Gradients) -> Result<()> {
        self.zero_grad();
        self.accumulate(grads, 1.0)
    }
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub(crate) BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub(crate) fn add(&mut self, name: &str, grad: Vec<f64>) {
        match self.0.get_mut(name) {
            Some(existing) => existing.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.0.insert(name.to_owned(), grad);
            }
        }
    }

    /// Sums another gradient set into this one in name order.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.0 {
            self.add(&name, g);
        }
    }
}
