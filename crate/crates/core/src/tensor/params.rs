//! Named parameter collections.
//!
//! A [`ParamSet`] is an ordered list of named tensors. Order is part of the
//! contract: optimizers walk entries by index, checkpoints serialize them in
//! sequence, and gradient buffers are laid out entry by entry.

use super::Real;
use crate::{Error, Result};

/// One named tensor.
#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Real> Param<E> {
    /// Rows and columns as consumed by the 2-D graph; rank-1 tensors map to
    /// one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

/// Ordered, uniquely named tensor collection.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E> {
    entries: Vec<Param<E>>,
}

impl<E: Real> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a tensor; names must be unique and sizes consistent.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<E>) -> Result<usize> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "param {name}: shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate param name {name}")));
        }
        self.entries.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param<E>] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> &Param<E> {
        &self.entries[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<E> {
        &mut self.entries[index]
    }

    /// Index of a parameter by name.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    /// Parameter data by name; panics if absent (schema is fixed at init).
    pub fn data(&self, name: &str) -> &[E] {
        let idx = self
            .find(name)
            .unwrap_or_else(|| panic!("missing param {name}"));
        &self.entries[idx].data
    }

    /// Total scalar element count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Element-by-element cast into another precision.
    pub fn cast<F: Real>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Zeroed gradient buffers matching this set's layout.
    pub fn zeros_like(&self) -> Vec<Vec<E>> {
        self.entries.iter().map(|p| vec![E::zero(); p.data.len()]).collect()
    }
}
