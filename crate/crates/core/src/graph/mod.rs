//! Graph samples, structural encodings, masked batching, synthetic datasets,
//! the `GPTGRAPH v1` text format and cross-validation folds.

mod batch;
mod encodings;
mod generators;
mod io;
pub mod motifs;
mod split;

pub use batch::{batch, batch_with_virtual, virtual_prompt_nodes, AugmentedGraph, BatchedGraph};
pub use encodings::{degree_encoding, rwpe, with_rwpe};
pub use generators::{gen_downstream, gen_pretext, Task, RAW_FEATURE_DIM};
pub use io::{format_graphs, parse_graphs, read_graph_file, write_graph_file};
pub use motifs::{connected_components, has_cycle_of_length, has_four_cycle, triangle_count};
pub use split::DatasetSplit;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("feature matrix must be 2-D with one row per node, got shape {0:?}")]
    FeatureShape(Vec<usize>),
    #[error("feature width {got} differs from {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("label arity {got} differs from {expected}")]
    LabelArity { expected: usize, got: usize },
    #[error("unknown task `{0}` (expected motif-presence, community-count or multi-motif)")]
    UnknownTask(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// An undirected simple graph with per-node features and an optional label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    features: Tensor,
    edges: Vec<(usize, usize)>,
    label: Option<Vec<f64>>,
}

impl GraphSample {
    /// Validates and stores the graph. Edges are kept in the given order and
    /// normalised so that `i < j`.
    pub fn new(features: Tensor, edges: Vec<(usize, usize)>, label: Option<Vec<f64>>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(GraphError::FeatureShape(features.shape().to_vec()));
        }
        let n = features.shape()[0];
        let mut seen = BTreeSet::new();
        let mut normalised = Vec::with_capacity(edges.len());
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::EdgeOutOfRange(i, j, n));
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            let e = (i.min(j), i.max(j));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
            normalised.push(e);
        }
        Ok(Self {
            features,
            edges: normalised,
            label,
        })
    }

    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn label(&self) -> Option<&[f64]> {
        self.label.as_deref()
    }

    pub fn label_arity(&self) -> usize {
        self.label.as_ref().map_or(0, Vec::len)
    }

    /// Sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for nb in &mut adj {
            nb.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n()];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != self.n() {
            return Err(GraphError::FeatureShape(features.shape().to_vec()));
        }
        Ok(Self {
            features,
            edges: self.edges.clone(),
            label: self.label.clone(),
        })
    }

    pub fn with_label(mut self, label: Option<Vec<f64>>) -> Self {
        self.label = label;
        self
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let d = self.feature_dim();
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n || perm.iter().any(|&p| p >= n) {
            return Err(GraphError::InvalidArgument("not a permutation".into()));
        }
        let mut data = vec![0.0; n * d];
        for (old, &new) in perm.iter().enumerate() {
            data[new * d..(new + 1) * d].copy_from_slice(self.features.row(old));
        }
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Self::new(
            Tensor::new(vec![n, d], data).expect("shape preserved"),
            edges,
            self.label.clone(),
        )
    }
}
