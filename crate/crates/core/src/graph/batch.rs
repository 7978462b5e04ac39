use super::{GraphError, GraphSample, Result};
use crate::tensor::Tensor;

/// A graph extended with virtual prompt nodes. The virtual nodes occupy
/// indices `original_nodes..graph.n()`, carry zero features and are joined to
/// every original node.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    pub graph: GraphSample,
    pub original_nodes: usize,
    /// Degrees of the original nodes measured on the un-augmented graph,
    /// followed by the virtual nodes' degrees.
    pub degrees: Vec<usize>,
}

/// Appends `count` virtual nodes to `g`, each connected to all original nodes.
pub fn virtual_prompt_nodes(g: &GraphSample, count: usize) -> AugmentedGraph {
    let n = g.n();
    let d = g.feature_dim();
    let mut degrees = g.degrees();
    if count == 0 {
        return AugmentedGraph {
            graph: g.clone(),
            original_nodes: n,
            degrees,
        };
    }
    let mut data = g.features().data().to_vec();
    data.resize((n + count) * d, 0.0);
    let mut edges = g.edges().to_vec();
    for v in n..n + count {
        edges.extend((0..n).map(|i| (i, v)));
    }
    degrees.extend(std::iter::repeat_n(n, count));
    let graph = GraphSample::new(
        Tensor::new(vec![n + count, d], data).expect("augmented shape"),
        edges,
        g.label().map(<[f64]>::to_vec),
    )
    .expect("augmentation keeps the graph simple");
    AugmentedGraph {
        graph,
        original_nodes: n,
        degrees,
    }
}

/// Zero-padded block of graphs. Flat row `b·max_nodes + i` holds node `i` of
/// sample `b`.
#[derive(Debug, Clone)]
pub struct BatchedGraph {
    pub batch_size: usize,
    pub max_nodes: usize,
    pub feature_dim: usize,
    /// `[batch_size·max_nodes × feature_dim]`, padding rows are zero.
    pub features: Tensor,
    /// Real (non-padding) positions, `batch_size·max_nodes`.
    pub node_mask: Vec<bool>,
    /// `[b][i][j]` flattened: true iff `i` and `j` are both real positions of `b`.
    pub attn_mask: Vec<bool>,
    /// Positions pooled by the readout: real positions that are not virtual nodes.
    pub readout_mask: Vec<bool>,
    /// Per-sample neighbour lists in local indices.
    pub adjacency: Vec<Vec<Vec<usize>>>,
    /// Unclamped degrees per flat row (zero on padding).
    pub degrees: Vec<usize>,
    pub node_counts: Vec<usize>,
    /// `(flat row, token index)` for every virtual node.
    pub virtual_rows: Vec<(usize, usize)>,
    /// `[batch_size × t]` when the samples carry labels.
    pub labels: Option<Tensor>,
}

impl BatchedGraph {
    pub fn label_arity(&self) -> usize {
        self.labels.as_ref().map_or(0, Tensor::cols)
    }

    /// Neighbour lists over flat rows with each node's own row included,
    /// as consumed by message passing. Padding rows aggregate only themselves.
    pub fn flat_neighbourhoods(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.batch_size * self.max_nodes);
        for b in 0..self.batch_size {
            let base = b * self.max_nodes;
            for i in 0..self.max_nodes {
                let mut nb = vec![base + i];
                if i < self.node_counts[b] {
                    nb.extend(self.adjacency[b][i].iter().map(|&j| base + j));
                    nb.sort_unstable();
                }
                out.push(nb);
            }
        }
        out
    }
}

/// Batches plain graphs; every real node is pooled by the readout.
pub fn batch(graphs: &[GraphSample]) -> Result<BatchedGraph> {
    let items: Vec<_> = graphs
        .iter()
        .map(|g| AugmentedGraph {
            graph: g.clone(),
            original_nodes: g.n(),
            degrees: g.degrees(),
        })
        .collect();
    build(&items)
}

/// Batches graphs after appending `count` virtual prompt nodes to each.
pub fn batch_with_virtual(graphs: &[GraphSample], count: usize) -> Result<BatchedGraph> {
    let items: Vec<_> = graphs.iter().map(|g| virtual_prompt_nodes(g, count)).collect();
    build(&items)
}

fn build(items: &[AugmentedGraph]) -> Result<BatchedGraph> {
    let first = items
        .first()
        .ok_or_else(|| GraphError::InvalidArgument("cannot batch an empty list".into()))?;
    let d = first.graph.feature_dim();
    let has_labels = first.graph.label().is_some();
    let t = first.graph.label_arity();
    for it in items {
        if it.graph.feature_dim() != d {
            return Err(GraphError::FeatureWidth {
                expected: d,
                got: it.graph.feature_dim(),
            });
        }
        if it.graph.label().is_some() != has_labels || it.graph.label_arity() != t {
            return Err(GraphError::LabelArity {
                expected: t,
                got: it.graph.label_arity(),
            });
        }
    }
    let b = items.len();
    let nmax = items.iter().map(|it| it.graph.n()).max().unwrap_or(0);
    let mut features = vec![0.0; b * nmax * d];
    let mut node_mask = vec![false; b * nmax];
    let mut readout_mask = vec![false; b * nmax];
    let mut attn_mask = vec![false; b * nmax * nmax];
    let mut degrees = vec![0; b * nmax];
    let mut virtual_rows = Vec::new();
    let mut adjacency = Vec::with_capacity(b);
    let mut node_counts = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b * t);
    for (s, it) in items.iter().enumerate() {
        let n = it.graph.n();
        let base = s * nmax;
        features[base * d..(base + n) * d].copy_from_slice(it.graph.features().data());
        for i in 0..n {
            node_mask[base + i] = true;
            readout_mask[base + i] = i < it.original_nodes;
            degrees[base + i] = it.degrees[i];
            for j in 0..n {
                attn_mask[(s * nmax + i) * nmax + j] = true;
            }
        }
        virtual_rows.extend((it.original_nodes..n).map(|i| (base + i, i - it.original_nodes)));
        adjacency.push(it.graph.adjacency());
        node_counts.push(n);
        if let Some(y) = it.graph.label() {
            labels.extend_from_slice(y);
        }
    }
    Ok(BatchedGraph {
        batch_size: b,
        max_nodes: nmax,
        feature_dim: d,
        features: Tensor::new(vec![b * nmax, d], features).expect("batch shape"),
        node_mask,
        attn_mask,
        readout_mask,
        adjacency,
        degrees,
        node_counts,
        virtual_rows,
        labels: has_labels.then(|| Tensor::new(vec![b, t], labels).expect("label shape")),
    })
}
