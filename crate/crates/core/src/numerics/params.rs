use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Result, SemiError};

/// Named parameter slots. Iteration order is the lexical order of names,
/// which keeps optimizer updates and serialisation deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params(BTreeMap<String, DenseMatrix>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, DenseMatrix>) -> Self {
        Self(map)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        self.0
            .get(name)
            .ok_or_else(|| SemiError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseMatrix> {
        self.0
            .get_mut(name)
            .ok_or_else(|| SemiError::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseMatrix)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseMatrix)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(DenseMatrix::len).sum()
    }

    /// Prefixes every name with `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> Params {
        Params(
            self.0
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        )
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        let head = format!("{prefix}.");
        Params(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn extend(&mut self, other: Params) {
        self.0.extend(other.0);
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(DenseMatrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(DenseMatrix::is_finite)
    }
}
