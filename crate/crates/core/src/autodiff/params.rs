use std::collections::BTreeMap;

use crate::tensor::{Tensor, TensorError};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether any backward pass reached this parameter since the last reset.
    /// Optimizers skip parameters that were not reached.
    pub has_grad: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            has_grad: false,
        }
    }
}

/// Parameters keyed by a stable dotted identifier, iterated in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Result<(), TensorError> {
        let id = id.into();
        if self.params.contains_key(&id) {
            return Err(TensorError::Contract(format!("duplicate parameter identifier {id}")));
        }
        self.params.insert(id, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.params.get_mut(id)
    }

    pub fn value(&self, id: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(id)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {id}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
            p.has_grad = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: &str, grad: &[f64]) -> Result<(), TensorError> {
        let p = self
            .params
            .get_mut(id)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {id}")))?;
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        p.has_grad = true;
        Ok(())
    }

    /// All values concatenated in identifier order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// All gradients concatenated in identifier order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// True when both stores hold the same identifiers with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.shape() == b.value.shape())
    }

    /// Bitwise equality of values (gradients ignored).
    pub fn values_bit_identical(&self, other: &ParamStore) -> bool {
        self.same_layout(other)
            && self.params.values().zip(other.params.values()).all(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
