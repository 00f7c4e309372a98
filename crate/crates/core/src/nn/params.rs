use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::NnError;
use crate::scalar::Scalar;

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Replaces a value; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let slot = self.params.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access to the values of one parameter; shape stays fixed.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.params.get_mut(name).map(|t| t.data_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }
}

/// Gradient arrays keyed like the store they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub(crate) fn insert(&mut self, name: &str, g: Tensor<T>) -> Result<(), NnError> {
        let slot = self.grads.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if slot.shape() != g.shape() {
            return Err(NnError::Shape(format!("gradient for {name}: {:?} vs {:?}", slot.shape(), g.shape())));
        }
        *slot = g;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` in place; key sets must match.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<(), NnError> {
        if self.grads.len() != other.grads.len() {
            return Err(NnError::KeyMismatch("gradient key sets differ".into()));
        }
        for ((ka, a), (kb, b)) in self.grads.iter_mut().zip(other.grads.iter()) {
            if ka != kb {
                return Err(NnError::KeyMismatch(format!("{ka} vs {kb}")));
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.values_mut() {
            g.scale_assign(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }

    pub(crate) fn keys_match(&self, store: &ParamStore<T>) -> bool {
        self.grads.len() == store.len()
            && self
                .grads
                .iter()
                .zip(store.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }
}
