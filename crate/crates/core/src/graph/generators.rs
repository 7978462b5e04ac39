use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::motifs::{connected_components, has_cycle_of_length, has_four_cycle, triangle_count};
use super::{GraphError, GraphSample, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Width of the random node features produced by every generator.
pub const RAW_FEATURE_DIM: usize = 4;

/// Synthetic downstream tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Binary: does the graph contain a 4-cycle.
    MotifPresence,
    /// Regression: number of planted communities (connected components).
    CommunityCount,
    /// Three binary tasks: contains a 3-, 4- and 5-cycle.
    MultiMotif,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MotifPresence => "motif-presence",
            Task::CommunityCount => "community-count",
            Task::MultiMotif => "multi-motif",
        }
    }

    pub fn label_arity(self) -> usize {
        match self {
            Task::MultiMotif => 3,
            _ => 1,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, Task::CommunityCount)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motif-presence" => Ok(Task::MotifPresence),
            "community-count" => Ok(Task::CommunityCount),
            "multi-motif" => Ok(Task::MultiMotif),
            other => Err(GraphError::UnknownTask(other.to_string())),
        }
    }
}

fn check_range((lo, hi): (usize, usize)) -> Result<()> {
    if lo < 4 || hi > 64 || lo > hi {
        return Err(GraphError::InvalidArgument(format!(
            "size range {lo}..={hi} must lie within 4..=64"
        )));
    }
    Ok(())
}

fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let data = (0..n * RAW_FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, RAW_FEATURE_DIM], data).expect("feature shape")
}

/// Relabels nodes with a random permutation so planted structure has no fixed position.
fn shuffle_nodes(rng: &mut ChaCha8Rng, n: usize, edges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    edges.into_iter().map(|(i, j)| (perm[i], perm[j])).collect()
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize, edges: &mut Vec<(usize, usize)>) {
    for i in 1..n {
        edges.push((rng.gen_range(0..i), i));
    }
}

/// Appends a ring of `size` new nodes starting at `*next`, bridged by one edge
/// to a random node in `0..anchor_count`.
fn attach_ring(rng: &mut ChaCha8Rng, size: usize, anchor_count: usize, next: &mut usize, edges: &mut Vec<(usize, usize)>) {
    let base = *next;
    for k in 0..size {
        edges.push((base + k, base + (k + 1) % size));
    }
    edges.push((rng.gen_range(0..anchor_count), base));
    *next += size;
}

/// Erdős–Rényi graphs (mean degree ≈ 3) labelled with triangle count divided by node count.
pub fn gen_pretext(count: usize, size_range: (usize, usize), seed: u64) -> Result<Vec<GraphSample>> {
    check_range(size_range)?;
    (0..count as u64)
        .map(|i| {
            let mut rng = stream(seed, "pretext", i);
            let n = rng.gen_range(size_range.0..=size_range.1);
            let p = (3.0 / (n - 1) as f64).min(1.0);
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen::<f64>() < p {
                        edges.push((a, b));
                    }
                }
            }
            let g = GraphSample::new(random_features(&mut rng, n), edges, None)?;
            let label = triangle_count(&g) as f64 / n as f64;
            Ok(g.with_label(Some(vec![label])))
        })
        .collect()
}

/// Downstream datasets. Classification tasks are balanced by construction;
/// every label is recomputed from the finished graph.
pub fn gen_downstream(count: usize, task: Task, size_range: (usize, usize), seed: u64) -> Result<Vec<GraphSample>> {
    check_range(size_range)?;
    let mut samples = (0..count as u64)
        .map(|i| {
            let mut rng = stream(seed, task.name(), i);
            match task {
                Task::MotifPresence => motif_presence(&mut rng, i % 2 == 0, size_range),
                Task::CommunityCount => community_count(&mut rng, (i % 4) as usize + 1),
                Task::MultiMotif => multi_motif(&mut rng, (i % 8) as u8, size_range),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    samples.shuffle(&mut stream(seed, "order", 0));
    Ok(samples)
}

fn ring_graph(rng: &mut ChaCha8Rng, target: usize, rings: &[usize]) -> Result<GraphSample> {
    let ring_nodes: usize = rings.iter().sum();
    let tree = target.saturating_sub(ring_nodes).max(2);
    let n = tree + ring_nodes;
    let mut edges = Vec::new();
    random_tree(rng, tree, &mut edges);
    let mut next = tree;
    for &r in rings {
        attach_ring(rng, r, tree, &mut next, &mut edges);
    }
    let edges = shuffle_nodes(rng, n, edges);
    GraphSample::new(random_features(rng, n), edges, None)
}

fn motif_presence(rng: &mut ChaCha8Rng, positive: bool, size_range: (usize, usize)) -> Result<GraphSample> {
    let target = rng.gen_range(size_range.0..=size_range.1);
    let mut rings = Vec::new();
    if rng.gen_bool(0.5) {
        rings.push(3);
    }
    if rng.gen_bool(0.5) {
        rings.push(5);
    }
    if positive {
        rings.push(4);
    }
    rings.shuffle(rng);
    let g = ring_graph(rng, target, &rings)?;
    let label = f64::from(u8::from(has_four_cycle(&g)));
    Ok(g.with_label(Some(vec![label])))
}

fn multi_motif(rng: &mut ChaCha8Rng, bits: u8, size_range: (usize, usize)) -> Result<GraphSample> {
    let target = rng.gen_range(size_range.0..=size_range.1);
    let mut rings: Vec<usize> = [3, 4, 5]
        .iter()
        .enumerate()
        .filter(|(k, _)| bits & (1 << k) != 0)
        .map(|(_, &r)| r)
        .collect();
    rings.shuffle(rng);
    let g = ring_graph(rng, target, &rings)?;
    let label = (3..=5)
        .map(|len| f64::from(u8::from(has_cycle_of_length(&g, len))))
        .collect();
    Ok(g.with_label(Some(label)))
}

fn community_count(rng: &mut ChaCha8Rng, communities: usize) -> Result<GraphSample> {
    let mut edges = Vec::new();
    let mut n = 0;
    for _ in 0..communities {
        let size = rng.gen_range(3..=6);
        let block = loop {
            let mut block = Vec::new();
            for a in 0..size {
                for b in (a + 1)..size {
                    if rng.gen::<f64>() < 0.6 {
                        block.push((a, b));
                    }
                }
            }
            let probe = GraphSample::new(Tensor::zeros(&[size, 1]), block.clone(), None)?;
            if connected_components(&probe) == 1 {
                break block;
            }
        };
        edges.extend(block.into_iter().map(|(a, b)| (a + n, b + n)));
        n += size;
    }
    let edges = shuffle_nodes(rng, n, edges);
    let g = GraphSample::new(random_features(rng, n), edges, None)?;
    let label = connected_components(&g) as f64;
    Ok(g.with_label(Some(vec![label])))
}
