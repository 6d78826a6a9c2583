//! Named parameter registry.
//!
//! Every trainable tensor is addressable by a dotted path such as
//! `attn.encoder.0.w_q`. A [`BTreeMap`] keeps iteration order deterministic,
//! which init, optimization and checkpointing all rely on.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter path: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter path: {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Register every tensor on a tape; the returned map resolves paths to
    /// tape variables.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Snap every value to the nearest f32. Parameters are kept on the f32
    /// grid at all times so that checkpoints (which store f32 tensors)
    /// round-trip without any loss.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Look up the gradient of a named parameter from a bound tape.
pub fn grad_by_name(
    grads: &mut crate::autodiff::Grads,
    binding: &BTreeMap<String, Var>,
    name: &str,
) -> Option<ArrayD<f64>> {
    binding.get(name).and_then(|&v| grads.take(v))
}
