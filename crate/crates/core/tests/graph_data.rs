mod common;

use common::{random_graph, rng};
use gpt_lab::graph::{
    batch, format_graphs, gen_downstream, gen_pretext, parse_graphs, read_graph_file, rwpe, write_graph_file,
    GraphError, GraphSample, Task,
};
use gpt_lab::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

fn adjacency_matrix(g: &GraphSample) -> Vec<Vec<bool>> {
    let mut a = vec![vec![false; g.n()]; g.n()];
    for &(i, j) in g.edges() {
        a[i][j] = true;
        a[j][i] = true;
    }
    a
}

fn triangles_by_subsets(g: &GraphSample) -> usize {
    let a = adjacency_matrix(g);
    let n = g.n();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if a[i][j] && a[j][k] && a[i][k] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Simple cycle of exactly `len` nodes, by trying every ordered node tuple.
fn has_cycle_by_tuples(g: &GraphSample, len: usize) -> bool {
    let a = adjacency_matrix(g);
    fn extend(a: &[Vec<bool>], path: &mut Vec<usize>, len: usize) -> bool {
        if path.len() == len {
            return a[path[len - 1]][path[0]];
        }
        for v in 0..a.len() {
            if !path.contains(&v) && a[*path.last().unwrap()][v] {
                path.push(v);
                if extend(a, path, len) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    (0..g.n()).any(|s| extend(&a, &mut vec![s], len))
}

fn components_by_union_find(g: &GraphSample) -> usize {
    let mut parent: Vec<usize> = (0..g.n()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(i, j) in g.edges() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        parent[a] = b;
    }
    (0..g.n()).filter(|&i| find(&mut parent, i) == i).count()
}

#[test]
fn file_round_trip_is_exact() {
    let mut r = rng(1);
    let mut samples: Vec<GraphSample> = (0..10)
        .map(|k| {
            let n = r.gen_range(1..9);
            let y = r.gen::<f64>() * 1e-7;
            random_graph(&mut r, n, 3, 0.4, Some(vec![y, k as f64]))
        })
        .collect();
    // awkward values survive too
    let mut f = samples[0].features().clone();
    f.data_mut()[0] = -0.0;
    f.data_mut()[1] = 1e-308;
    f.data_mut()[2] = -123_456_789.123_456_78;
    samples[0] = samples[0].with_features(f).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.gptgraph");
    write_graph_file(&path, &samples).unwrap();
    let back = read_graph_file(&path).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert!(a.features().bit_eq(b.features()));
        assert_eq!(a.edges(), b.edges());
        let bits = |g: &GraphSample| g.label().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(format_graphs(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn header_only_file_is_empty() {
    assert!(parse_graphs("GPTGRAPH v1 d=4 t=1\n").unwrap().is_empty());
    assert_eq!(format_graphs(&[]).unwrap(), "GPTGRAPH v1 d=0 t=0\n");
}

#[test]
fn errors_carry_line_numbers() {
    let mut text = String::from("GPTGRAPH v1 d=1 t=1\ng 6 2\n");
    for _ in 0..6 {
        text.push_str("0.5\n");
    }
    text.push_str("e 0 1\ne 5 9\ny 1\n");
    match parse_graphs(&text) {
        Err(GraphError::Validation { line, .. }) => assert_eq!(line, 10),
        other => panic!("expected a validation error, got {other:?}"),
    }
    let bad = "GPTGRAPH v1 d=2 t=0\ng 1 0\n0.5 abc\ny\n";
    assert!(matches!(parse_graphs(bad), Err(GraphError::Parse { line: 3, .. })));
    assert!(matches!(parse_graphs("GPTGRAPH v2 d=2 t=0\n"), Err(GraphError::Parse { line: 1, .. })));
    assert!(matches!(parse_graphs("GPTGRAPH v1 d=1 t=0\ng 2 0\n1\n"), Err(GraphError::Parse { line: 4, .. })));
}

#[test]
fn pretext_labels_are_triangle_densities() {
    let samples = gen_pretext(200, (4, 20), 3).unwrap();
    for g in &samples {
        assert_eq!(g.label().unwrap(), &[triangles_by_subsets(g) as f64 / g.n() as f64]);
        assert!((4..=20).contains(&g.n()));
    }
    assert!(samples.iter().any(|g| g.label().unwrap()[0] > 0.0));
    assert_eq!(samples, gen_pretext(200, (4, 20), 3).unwrap());
    assert_ne!(samples, gen_pretext(200, (4, 20), 4).unwrap());
    assert!(gen_pretext(1, (3, 8), 0).is_err());
    assert!(gen_pretext(1, (8, 65), 0).is_err());
}

#[test]
fn k4_and_trees() {
    let k4 = GraphSample::new(Tensor::zeros(&[4, 1]), vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], None).unwrap();
    assert_eq!(gpt_lab::graph::triangle_count(&k4), 4);
    assert!(gpt_lab::graph::has_four_cycle(&k4));
    let mut r = rng(4);
    for _ in 0..50 {
        let n = r.gen_range(2..15);
        let edges = (1..n).map(|i| (r.gen_range(0..i), i)).collect();
        let tree = GraphSample::new(Tensor::zeros(&[n, 1]), edges, None).unwrap();
        assert_eq!(gpt_lab::graph::triangle_count(&tree), 0);
        assert!(!gpt_lab::graph::has_four_cycle(&tree));
    }
}

#[test]
fn motif_presence_labels_and_balance() {
    let samples = gen_downstream(400, Task::MotifPresence, (6, 14), 5).unwrap();
    let mut positives = 0;
    for g in &samples {
        let y = g.label().unwrap()[0];
        assert_eq!(y, f64::from(u8::from(has_cycle_by_tuples(g, 4))));
        positives += y as usize;
    }
    let share = positives as f64 / samples.len() as f64;
    assert!((share - 0.5).abs() <= 0.05, "positive share {share}");
    assert_eq!(samples, gen_downstream(400, Task::MotifPresence, (6, 14), 5).unwrap());
}

#[test]
fn multi_motif_labels() {
    let samples = gen_downstream(80, Task::MultiMotif, (6, 12), 6).unwrap();
    let mut per_task = [0usize; 3];
    for g in &samples {
        let y = g.label().unwrap();
        for (k, len) in (3..=5).enumerate() {
            assert_eq!(y[k], f64::from(u8::from(has_cycle_by_tuples(g, len))), "cycle of {len}");
            per_task[k] += y[k] as usize;
        }
    }
    for c in per_task {
        let share = c as f64 / samples.len() as f64;
        assert!((share - 0.5).abs() <= 0.05, "positive share {share}");
    }
}

#[test]
fn community_labels_match_components() {
    for g in gen_downstream(100, Task::CommunityCount, (4, 64), 7).unwrap() {
        assert_eq!(g.label().unwrap(), &[components_by_union_find(&g) as f64]);
    }
    assert!("triangles".parse::<Task>().is_err());
}

#[test]
fn batch_masks() {
    let mut r = rng(8);
    let graphs: Vec<GraphSample> = [3, 5, 1].iter().map(|&n| random_graph(&mut r, n, 2, 0.5, None)).collect();
    let b = batch(&graphs).unwrap();
    assert_eq!(b.max_nodes, 5);
    for (k, g) in graphs.iter().enumerate() {
        let rows = &b.node_mask[k * 5..(k + 1) * 5];
        assert_eq!(rows.iter().filter(|&&m| m).count(), g.n());
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(b.attn_mask[k * 25 + i * 5 + j], rows[i] && rows[j]);
            }
        }
        for i in g.n()..5 {
            assert!(b.features.row(k * 5 + i).iter().all(|&v| v == 0.0));
        }
    }
    let wide = random_graph(&mut r, 2, 3, 0.5, None);
    assert!(batch(&[graphs[0].clone(), wide]).is_err());
}

#[test]
fn rwpe_matches_dense_powers_and_is_equivariant() {
    let mut r = rng(9);
    for _ in 0..20 {
        let n = r.gen_range(2..10);
        let g = random_graph(&mut r, n, 1, 0.4, None);
        let a = adjacency_matrix(&g);
        // dense transition matrix, isolated rows left at zero
        let t: Vec<Vec<f64>> = a
            .iter()
            .map(|row| {
                let d = row.iter().filter(|&&x| x).count();
                row.iter().map(|&x| if x { 1.0 / d as f64 } else { 0.0 }).collect()
            })
            .collect();
        let enc = rwpe(&g, 4);
        let mut power = t.clone();
        for s in 0..4 {
            for i in 0..n {
                assert!((enc.get2(i, s) - power[i][i]).abs() <= 1e-12);
            }
            power = (0..n)
                .map(|i| (0..n).map(|j| (0..n).map(|k| power[i][k] * t[k][j]).sum()).collect())
                .collect();
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pe = rwpe(&g.permuted(&perm).unwrap(), 4);
        for i in 0..n {
            for s in 0..4 {
                assert!((pe.get2(perm[i], s) - enc.get2(i, s)).abs() <= 1e-12);
            }
        }
    }
}
