//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape that evaluates nodes eagerly as they are appended.
//! Stochastic regularizers never draw randomness inside the graph: callers
//! sample masks from an explicit RNG and insert them as constants, so a
//! replayed graph (see [`Graph::forward`]) is a pure function of its leaves.

mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

use std::collections::HashMap;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, DType};
pub use gradcheck::{check_gradient, random_projection, GradCheckReport};
pub use graph::{logsumexp, sigmoid, Gradients, Graph, LeafKind, Var};
pub(crate) use graph::softmax_in_place;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("node #{node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("node #{node} ({op}) produced a non-finite value {detail}")]
    NonFinite { node: usize, op: &'static str, detail: String },
    #[error("backward called on a graph whose leaves changed since the last forward pass")]
    NotEvaluated,
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; parameter layout is fixed at build time.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}
