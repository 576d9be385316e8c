//! Named parameter collections.
//!
//! Models own their parameters through a `ParamStore`: a sorted map from
//! stable dotted names ("stem.conv.weight") to tensors. Layers keep only the
//! names; passes bind them onto a tape, optimizers update them in place, and
//! checkpoints serialize them by name. Non-trainable entries hold state such
//! as batch-norm running statistics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(
                "param_store",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    /// Replaces a value; the new tensor must keep the existing shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_store.set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Removes an entry, returning its tensor. Used by head replacement.
    pub fn remove(&mut self, name: &str) -> Result<Tensor> {
        self.entries
            .remove(name)
            .map(|e| e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Iterates entries in name order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
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

    /// Total number of scalar parameters in trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Fan-in-scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn set_value_checks_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(store.set_value("w", Tensor::zeros(&[4])).is_err());
        assert!(store.set_value("w", Tensor::zeros(&[2, 2])).is_ok());
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = stream(1, StreamKind::ParamInit, 0, 0);
        let t = fan_in_uniform(&mut rng, &[100], 16);
        assert!(t.iter().all(|v| v.abs() <= 0.25));
    }
}
