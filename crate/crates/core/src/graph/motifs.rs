//! Exact motif statistics used to label generated graphs.

use super::GraphSample;

pub fn triangle_count(g: &GraphSample) -> usize {
    let adj = g.adjacency();
    let mut count = 0;
    for (u, nb) in adj.iter().enumerate() {
        for &v in nb.iter().filter(|&&v| v > u) {
            count += adj[v].iter().filter(|&&w| w > v && adj[u].binary_search(&w).is_ok()).count();
        }
    }
    count
}

/// A 4-cycle exists iff two distinct nodes share at least two neighbours.
pub fn has_four_cycle(g: &GraphSample) -> bool {
    let adj = g.adjacency();
    let n = g.n();
    for u in 0..n {
        for v in (u + 1)..n {
            let common = adj[u].iter().filter(|w| adj[v].binary_search(w).is_ok()).count();
            if common >= 2 {
                return true;
            }
        }
    }
    false
}

/// Whether the graph contains a simple cycle with exactly `len` nodes (`len ≥ 3`).
pub fn has_cycle_of_length(g: &GraphSample, len: usize) -> bool {
    assert!(len >= 3, "cycles have at least three nodes");
    let adj = g.adjacency();
    let n = g.n();
    let mut on_path = vec![false; n];
    let mut path = Vec::with_capacity(len);
    // each cycle is found from its smallest node
    for start in 0..n {
        on_path[start] = true;
        path.push(start);
        if extend(&adj, start, len, &mut path, &mut on_path) {
            return true;
        }
        path.pop();
        on_path[start] = false;
    }
    false
}

fn extend(adj: &[Vec<usize>], start: usize, len: usize, path: &mut Vec<usize>, on_path: &mut [bool]) -> bool {
    let last = *path.last().expect("non-empty path");
    if path.len() == len {
        return adj[last].binary_search(&start).is_ok();
    }
    for &next in &adj[last] {
        if next <= start || on_path[next] {
            continue;
        }
        on_path[next] = true;
        path.push(next);
        let found = extend(adj, start, len, path, on_path);
        path.pop();
        on_path[next] = false;
        if found {
            return true;
        }
    }
    false
}

pub fn connected_components(g: &GraphSample) -> usize {
    let adj = g.adjacency();
    let mut seen = vec![false; g.n()];
    let mut components = 0;
    for s in 0..g.n() {
        if seen[s] {
            continue;
        }
        components += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn graph(n: usize, edges: &[(usize, usize)]) -> GraphSample {
        GraphSample::new(Tensor::zeros(&[n, 1]), edges.to_vec(), None).unwrap()
    }

    fn complete(n: usize) -> GraphSample {
        let edges: Vec<_> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        graph(n, &edges)
    }

    #[test]
    fn complete_graph_counts() {
        assert_eq!(triangle_count(&complete(4)), 4);
        assert_eq!(triangle_count(&complete(5)), 10);
        assert!(has_four_cycle(&complete(4)));
        assert!(has_cycle_of_length(&complete(5), 5));
    }

    #[test]
    fn rings() {
        let c4 = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!(has_four_cycle(&c4));
        assert!(!has_cycle_of_length(&c4, 3));
        assert!(has_cycle_of_length(&c4, 4));
        assert!(!has_cycle_of_length(&c4, 5));
        let c5 = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        assert!(!has_four_cycle(&c5));
        assert!(has_cycle_of_length(&c5, 5));
    }

    #[test]
    fn components() {
        assert_eq!(connected_components(&graph(5, &[(0, 1), (2, 3)])), 3);
        assert_eq!(connected_components(&graph(0, &[])), 0);
    }
}
