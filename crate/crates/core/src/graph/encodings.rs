use super::{GraphSample, Result};
use crate::tensor::Tensor;

/// Random-walk positional encoding: entry `(i, s-1)` is the probability that a
/// uniform random walk from `i` is back at `i` after `s` steps, i.e. the
/// diagonal of `(D⁻¹A)^s` for `s = 1..=k`. Isolated nodes get zero rows.
pub fn rwpe(g: &GraphSample, k: usize) -> Tensor {
    let n = g.n();
    let adj = g.adjacency();
    let mut out = vec![0.0; n * k];
    if k == 0 {
        return Tensor::new(vec![n, 0], out).expect("empty encoding");
    }
    // walk[i][j]: probability of being at j after s steps from i
    let mut walk = vec![0.0; n * n];
    for i in 0..n {
        walk[i * n + i] = 1.0;
    }
    let mut next = vec![0.0; n * n];
    for s in 0..k {
        next.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            for u in 0..n {
                let p = walk[i * n + u];
                if p == 0.0 || adj[u].is_empty() {
                    continue;
                }
                let share = p / adj[u].len() as f64;
                for &v in &adj[u] {
                    next[i * n + v] += share;
                }
            }
        }
        std::mem::swap(&mut walk, &mut next);
        for i in 0..n {
            out[i * k + s] = walk[i * n + i];
        }
    }
    Tensor::new(vec![n, k], out).expect("rwpe shape")
}

/// Node degrees clamped to `max_degree`.
pub fn degree_encoding(g: &GraphSample, max_degree: usize) -> Vec<usize> {
    g.degrees().into_iter().map(|d| d.min(max_degree)).collect()
}

/// Returns `g` with its `k`-step RWPE concatenated to the node features.
pub fn with_rwpe(g: &GraphSample, k: usize) -> Result<GraphSample> {
    if k == 0 {
        return Ok(g.clone());
    }
    let enc = rwpe(g, k);
    let d = g.feature_dim();
    let mut data = Vec::with_capacity(g.n() * (d + k));
    for i in 0..g.n() {
        data.extend_from_slice(g.features().row(i));
        data.extend_from_slice(enc.row(i));
    }
    g.with_features(Tensor::new(vec![g.n(), d + k], data).expect("concat shape"))
}
