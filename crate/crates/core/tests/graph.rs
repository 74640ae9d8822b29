mod common;

use std::collections::BTreeSet;

use common::*;
use glc_core::knn_graph::*;
use ndarray::Array2;
use proptest::prelude::*;

fn brute_knn(sim: &Array2<f64>, k: usize, mask: &[bool]) -> BTreeSet<(usize, usize)> {
    let n = sim.nrows();
    let members: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let k = k.min(members.len() - 1);
    let mut out = BTreeSet::new();
    for &i in &members {
        let mut order: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| sim[[i, b]].partial_cmp(&sim[[i, a]]).unwrap().then(a.cmp(&b)));
        for &j in &order[..k] {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out
}

fn edge_set(g: &KnnGraph) -> BTreeSet<(usize, usize)> {
    g.edges().iter().copied().collect()
}

#[test]
fn joint_similarity_matches_elementwise_sum() {
    let set = random_set(3, 12, 5, Some(4));
    let lam = 0.3;
    let s = joint_similarity(&set, lam).unwrap();
    let (f, p) = (set.features(), set.scores().unwrap());
    for i in 0..12 {
        for j in 0..12 {
            let mut ff = 0.0;
            for c in 0..5 {
                ff += f[[i, c]] * f[[j, c]];
            }
            let mut ss = 0.0;
            for c in 0..4 {
                ss += p[[i, c]] * p[[j, c]];
            }
            assert!((s[[i, j]] - (lam * ff + (1.0 - lam) * ss)).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_similarity_needs_scores_below_one() {
    let set = random_set(1, 5, 3, None);
    assert!(joint_similarity(&set, 0.5).is_err());
    assert!(joint_similarity(&set, 1.0).is_ok());
    assert!(joint_similarity(&set, 1.5).is_err());
}

#[test]
fn knn_matches_sorted_scan() {
    for seed in 0..20 {
        let set = random_set(seed, 30, 4, None);
        let sim = joint_similarity(&set, 1.0).unwrap();
        let mut r = rng(seed + 100);
        let mask: Vec<bool> = (0..30).map(|_| rand::Rng::random_bool(&mut r, 0.8)).collect();
        if mask.iter().filter(|&&m| m).count() < 2 {
            continue;
        }
        for k in [1, 3, 7, 40] {
            let g = build_knn_graph(&sim, k, &mask).unwrap();
            assert_eq!(edge_set(&g), brute_knn(&sim, k, &mask), "seed {seed} k {k}");
        }
    }
}

#[test]
fn knn_ties_break_toward_lower_index() {
    // Every off-diagonal similarity equal: node i must pick the lowest k others.
    let sim = Array2::from_elem((6, 6), 0.5);
    let g = build_knn_graph(&sim, 2, &[true; 6]).unwrap();
    assert!(g.neighbors(5).starts_with(&[0, 1]));
    assert_eq!(edge_set(&g), brute_knn(&sim, 2, &[true; 6]));
}

#[test]
fn knn_edge_similarity_is_carried() {
    let set = random_set(5, 15, 3, None);
    let sim = joint_similarity(&set, 1.0).unwrap();
    let g = build_knn_graph(&sim, 4, &[true; 15]).unwrap();
    for (&(i, j), &s) in g.edges().iter().zip(g.edge_sim()) {
        assert_eq!(s, sim[[i, j]]);
    }
}

#[test]
fn knn_rejects_degenerate_input() {
    let sim = Array2::from_elem((3, 3), 0.0);
    assert!(build_knn_graph(&sim, 0, &[true; 3]).is_err());
    assert!(build_knn_graph(&sim, 1, &[true, false, false]).is_err());
    assert!(build_knn_graph(&sim, 1, &[true; 2]).is_err());
    assert!(build_knn_graph(&Array2::zeros((2, 3)), 1, &[true; 2]).is_err());
}

#[test]
fn adjacency_matches_dense_oracle() {
    for seed in 0..10 {
        let g = random_graph(seed, 15, 0.2);
        let dense = dense_a_hat(15, g.edges());
        let a = normalized_adjacency(&g).to_dense();
        assert!((&a - &dense).iter().all(|v| v.abs() < 1e-15));
        for r in a.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let mut r = rng(seed);
        let h = gaussian(&mut r, 15, 3);
        let applied = normalized_adjacency(&g).apply(&h);
        assert!((&applied - &dense.dot(&h)).iter().all(|v| v.abs() < 1e-12));
        let back = normalized_adjacency(&g).apply_transpose(&h);
        assert!((&back - &dense.t().dot(&h)).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn components_match_union_find() {
    for (t, p) in [0.01, 0.05, 0.2].into_iter().enumerate() {
        for seed in 0..30 {
            let n = 10 + (seed as usize * 7) % 90;
            let g = random_graph(seed * 3 + t as u64, n, p);
            let got = connected_components(&g);
            let want = union_find_labels(n, g.edges());
            assert_eq!(partition(got.labels()), partition(&want));
        }
    }
}

#[test]
fn components_leave_masked_nodes_out() {
    let g = KnnGraph::from_edges(4, [(0, 1, 0.0)], vec![true, true, false, true], 1).unwrap();
    let c = connected_components(&g);
    assert_eq!(c.labels(), &[0, 0, -1, 1]);
}

#[test]
fn connectivity_matches_neighbor_sets() {
    for seed in 0..40 {
        let g = random_graph(seed, 25, 0.25);
        for &(i, j) in g.edges() {
            assert_eq!(node_connectivity(&g, i, j), brute_nc(25, g.edges(), i, j));
        }
    }
}

#[test]
fn graph_file_round_trip() {
    let g = random_graph(9, 20, 0.3);
    let conf: Vec<f64> = (0..g.n_edges()).map(|e| e as f64 / 100.0).collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.txt");
    save_graph(&g, Some(&conf), &p).unwrap();
    let back = load_graph(&p).unwrap();
    assert_eq!(back.n(), 20);
    assert_eq!(back.edges(), g.edges());
    for (a, b) in back.edge_sim().iter().zip(g.edge_sim()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn graph_file_errors_name_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.txt");
    std::fs::write(&p, "# nodes 3\n0 1 0.5 nan\n0 x 0.5 nan\n").unwrap();
    match load_graph(&p) {
        Err(glc_core::Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn similarity_is_linear_in_lambda(seed in 0u64..1000, lam in 0.0f64..=1.0) {
        let set = random_set(seed, 8, 3, Some(3));
        let s = joint_similarity(&set, lam).unwrap();
        let s1 = joint_similarity(&set, 1.0).unwrap();
        let s0 = joint_similarity(&set, 0.0).unwrap();
        let mix = &s1 * lam + &s0 * (1.0 - lam);
        prop_assert!((&s - &mix).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn knn_ignores_constant_shift(seed in 0u64..1000, k in 1usize..10, shift in -0.5f64..0.5) {
        let set = random_set(seed, 16, 4, None);
        let sim = joint_similarity(&set, 1.0).unwrap();
        let shifted = sim.mapv(|v| v + shift);
        let mask = vec![true; 16];
        let a = build_knn_graph(&sim, k, &mask).unwrap();
        let b = build_knn_graph(&shifted, k, &mask).unwrap();
        prop_assert_eq!(edge_set(&a), edge_set(&b));
    }

    #[test]
    fn knn_degrees_reach_k(seed in 0u64..1000, k in 1usize..20) {
        let set = random_set(seed, 20, 3, None);
        let g = build_knn_graph(&joint_similarity(&set, 1.0).unwrap(), k, &[true; 20]).unwrap();
        let k_eff = k.min(19);
        for i in 0..20 {
            prop_assert!(g.degree(i) >= k_eff);
            for &j in g.neighbors(i) {
                prop_assert!(g.has_edge(j, i));
            }
        }
    }

    #[test]
    fn connectivity_is_symmetric_and_bounded(seed in 0u64..1000, p in 0.05f64..0.6) {
        let g = random_graph(seed, 18, p);
        for &(i, j) in g.edges() {
            let a = node_connectivity(&g, i, j);
            prop_assert_eq!(a, node_connectivity(&g, j, i));
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
