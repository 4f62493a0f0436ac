use std::collections::BTreeMap;

use crate::{AutodiffError, Gradients, Real, Result, Tensor};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F> Default for ParameterStore<F> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Adds every parameter gradient in `grads` to the matching tensor.
    /// Names absent from the store are ignored.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (name, g) in grads.params() {
            if let Some(t) = self.params.get_mut(name) {
                t.accumulate_grad(g)
                    .expect("gradient shape matches the parameter it was recorded from");
            }
        }
    }

    /// Copy in another numeric type; gradients are dropped.
    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
