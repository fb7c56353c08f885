use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs. Every stored parameter
    /// must be supplied exactly once with a matching shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = alloc::vec![false; self.values.len()];
        for (name, value) in entries {
            let id = self
                .find(name)
                .ok_or_else(|| Error::invalid(alloc::format!("unknown parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::shape(
                    "ParamStore::load_named",
                    alloc::format!("`{name}`: {:?} vs {:?}", self.values[id.0].shape(), value.shape()),
                ));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(alloc::format!("missing parameter `{}`", self.names[i])));
        }
        Ok(())
    }

    /// Round every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.values {
            for v in t.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}
