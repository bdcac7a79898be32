//! Named parameter collections.
//!
//! [`ParamSet`] holds plain values and is what gets initialized, updated,
//! checkpointed and sent between threads. [`ParamVars`] holds the same names
//! bound to [`Tensor`]s on a graph, for differentiation.

use std::collections::BTreeMap;

use crate::autodiff::{Array, Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Array::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Array::is_finite)
    }

    /// Registers every entry as a gradient-carrying leaf of `graph`.
    pub fn attach(&self, graph: &Graph) -> ParamVars {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect()
    }

    /// Entries as constant tensors (no graph).
    pub fn constants(&self) -> ParamVars {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::from(v.clone())))
            .collect()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Element-wise combination of two sets with the same layout.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, a) in &self.entries {
            let b = other
                .get(name)
                .ok_or_else(|| Error::Usage(format!("missing entry for parameter `{name}`")))?;
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        self.entries.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect()
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Named tensors, ordered by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    entries: BTreeMap<String, Tensor>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> ParamSet {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value().clone()))
            .collect()
    }

    pub fn detach(&self) -> ParamVars {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.detach()))
            .collect()
    }
}

impl FromIterator<(String, Tensor)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamVars {
            entries: iter.into_iter().collect(),
        }
    }
}
