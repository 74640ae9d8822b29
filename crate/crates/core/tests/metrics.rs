mod common;

use common::*;
use glc_core::dataset::Labeling;
use glc_core::knn_graph::KnnGraph;
use glc_core::metrics::*;
use ndarray::array;
use proptest::prelude::*;

/// NMI from a dense contingency table, outliers expanded to singletons.
fn nmi_oracle(pred: &[i64], gt: &[i64]) -> f64 {
    let n = pred.len();
    let mut next = 1_000_000;
    let p: Vec<i64> = pred
        .iter()
        .map(|&v| {
            if v < 0 {
                next += 1;
                next
            } else {
                v
            }
        })
        .collect();
    let mut us: Vec<i64> = p.clone();
    us.sort();
    us.dedup();
    let mut vs: Vec<i64> = gt.to_vec();
    vs.sort();
    vs.dedup();
    let mut table = vec![vec![0.0; vs.len()]; us.len()];
    for i in 0..n {
        let a = us.binary_search(&p[i]).unwrap();
        let b = vs.binary_search(&gt[i]).unwrap();
        table[a][b] += 1.0;
    }
    let nf = n as f64;
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..vs.len()).map(|b| table.iter().map(|r| r[b]).sum()).collect();
    let h = |m: &[f64]| -> f64 { m.iter().filter(|&&x| x > 0.0).map(|&x| -(x / nf) * (x / nf).ln()).sum() };
    let (hu, hv) = (h(&row), h(&col));
    let mut mi = 0.0;
    for a in 0..us.len() {
        for b in 0..vs.len() {
            let c = table[a][b];
            if c > 0.0 {
                mi += c / nf * ((c * nf) / (row[a] * col[b])).ln();
            }
        }
    }
    if hu + hv == 0.0 {
        return 1.0;
    }
    if hu == 0.0 || hv == 0.0 {
        return 0.0;
    }
    2.0 * mi / (hu + hv)
}

fn pair_oracle(pred: &[i64], gt: &[i64]) -> (f64, f64) {
    let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let sp = pred[i] >= 0 && pred[i] == pred[j];
            let sg = gt[i] == gt[j];
            tp += f64::from(u8::from(sp && sg));
            pp += f64::from(u8::from(sp));
            gp += f64::from(u8::from(sg));
        }
    }
    (if pp == 0.0 { 1.0 } else { tp / pp }, if gp == 0.0 { 1.0 } else { tp / gp })
}

#[test]
fn nmi_self_is_one() {
    let gt = [0, 0, 1, 1, 2];
    assert_eq!(nmi(&labeling(gt.to_vec()), &gt).unwrap(), 1.0);
}

#[test]
fn nmi_matches_contingency_oracle() {
    for seed in 0..50 {
        let pred = random_labels(seed, 40, 5, 0.15);
        let gt = random_labels(seed + 1000, 40, 4, 0.0);
        let got = nmi(&labeling(pred.clone()), &gt).unwrap();
        assert!((got - nmi_oracle(&pred, &gt)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn pairwise_matches_pair_scan() {
    for seed in 0..50 {
        let pred = random_labels(seed, 30, 4, 0.2);
        let gt = random_labels(seed + 7, 30, 3, 0.0);
        let (p, r, f) = pairwise_prf(&labeling(pred.clone()), &gt).unwrap();
        let (po, ro) = pair_oracle(&pred, &gt);
        assert!((p - po).abs() < 1e-12 && (r - ro).abs() < 1e-12);
        assert!((f - 2.0 * po * ro / (po + ro)).abs() < 1e-12);
    }
}

#[test]
fn all_outliers_have_vacuous_precision() {
    let (p, r, _) = pairwise_prf(&Labeling::all_outliers(4), &[0, 0, 1, 1]).unwrap();
    assert_eq!((p, r), (1.0, 0.0));
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(nmi(&labeling(vec![0, 1]), &[0]).is_err());
    assert!(pairwise_prf(&labeling(vec![0, 1]), &[0, 1, 2]).is_err());
}

#[test]
fn graph_recall_counts_true_pairs() {
    let g = KnnGraph::from_edges(4, [(0, 1, 0.0), (1, 2, 0.0)], vec![true; 4], 1).unwrap();
    // Same-identity pairs: (0,1), (2,3). Only (0,1) is an edge.
    assert_eq!(graph_recall(&g, &[0, 0, 1, 1]).unwrap(), 0.5);
    assert!(graph_recall(&g, &[0, 1, 2, 3]).is_err());
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[true, true, false]), 1.0);
    assert!((average_precision(&[false, true]) - 0.5).abs() < 1e-15);
    assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(average_precision(&[false, false]), 0.0);
}

#[test]
fn retrieval_map_on_axis_vectors() {
    let q = array![[1.0, 0.0], [0.0, 1.0]];
    let g = array![[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]];
    let m = retrieval_map(q.view(), &[0, 1], g.view(), &[1, 0, 1]).unwrap();
    // Query 0 finds its single match first; query 1 ranks [0, 2, 1] with matches at 1 and 2.
    assert!((m - 1.0).abs() < 1e-15);
    let err = retrieval_map(q.view(), &[0, 9], g.view(), &[1, 0, 1]).unwrap_err();
    assert!(err.to_string().contains("query 1"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nmi_is_symmetric_and_bounded(seed in 0u64..10_000, n in 2usize..40) {
        let a = random_labels(seed, n, 5, 0.0);
        let b = random_labels(seed ^ 99, n, 4, 0.0);
        let ab = nmi_partitions(&a, &b).unwrap();
        let ba = nmi_partitions(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn nmi_ignores_label_names(seed in 0u64..10_000, n in 2usize..40, offset in 1i64..100) {
        let a = random_labels(seed, n, 5, 0.2);
        let b = random_labels(seed ^ 5, n, 4, 0.0);
        let renamed: Vec<i64> = a.iter().map(|&v| if v < 0 { v } else { (4 - v) * 7 + offset }).collect();
        let x = nmi(&labeling(a), &b).unwrap();
        let y = nmi(&labeling(renamed), &b).unwrap();
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn graph_recall_grows_with_edges(seed in 0u64..10_000) {
        let gt = random_labels(seed, 20, 4, 0.0);
        let dense = random_graph(seed, 20, 0.4);
        let keep: Vec<bool> = (0..dense.n_edges()).map(|e| e % 2 == 0).collect();
        let sparse = dense.retain(&keep);
        prop_assume!(graph_recall(&dense, &gt).is_ok());
        prop_assert!(graph_recall(&sparse, &gt).unwrap() <= graph_recall(&dense, &gt).unwrap());
    }
}
