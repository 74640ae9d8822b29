//! Fixtures and brute-force reference implementations shared by the
//! integration tests. Nothing here calls into the code it checks.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use glc_core::dataset::{EmbeddingSet, Labeling};
use glc_core::knn_graph::KnnGraph;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.01..1.0));
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

pub fn random_set(seed: u64, n: usize, d: usize, c: Option<usize>) -> EmbeddingSet {
    let mut r = rng(seed);
    let f = unit_rows(&mut r, n, d);
    let s = c.map(|c| prob_rows(&mut r, n, c));
    EmbeddingSet::new(f, s, vec![0; n], None).unwrap()
}

/// Points scattered around `k` random directions.
pub fn blob_set(seed: u64, k: usize, per: usize, d: usize, spread: f64) -> (EmbeddingSet, Vec<i64>) {
    let mut r = rng(seed);
    let centers = unit_rows(&mut r, k, d);
    let n = k * per;
    let mut x = Array2::zeros((n, d));
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut r);
            x[[i, j]] = centers[[c, j]] + spread * e;
        }
        gt.push(c as i64);
    }
    let set = EmbeddingSet::from_raw_features(x, None, vec![0; n], Some(gt.clone())).unwrap();
    (set, gt)
}

/// Erdős–Rényi graph over `n` nodes with edge probability `p`.
pub fn random_graph(seed: u64, n: usize, p: f64) -> KnnGraph {
    let mut r = rng(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(p) {
                pairs.push((i, j, r.random_range(-1.0..1.0)));
            }
        }
    }
    KnnGraph::from_edges(n, pairs, vec![true; n], 1).unwrap()
}

pub fn random_labels(seed: u64, n: usize, k: i64, outlier_p: f64) -> Vec<i64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            if r.random_bool(outlier_p) {
                -1
            } else {
                r.random_range(0..k)
            }
        })
        .collect()
}

/// Canonical form of a partition: members grouped, groups sorted. Outliers
/// (`-1`) are kept as their own marked set.
pub fn partition(labels: &[i64]) -> (BTreeSet<Vec<usize>>, Vec<usize>) {
    let mut groups: HashMap<i64, Vec<usize>> = HashMap::new();
    let mut noise = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            noise.push(i);
        } else {
            groups.entry(l).or_default().push(i);
        }
    }
    (groups.into_values().collect(), noise)
}

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Component labels (root index) from a plain edge list.
pub fn union_find_labels(n: usize, edges: &[(usize, usize)]) -> Vec<i64> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    (0..n).map(|i| uf.find(i) as i64).collect()
}

/// Node connectivity from explicit neighbor sets.
pub fn brute_nc(n: usize, edges: &[(usize, usize)], i: usize, j: usize) -> f64 {
    let nb = |x: usize| -> BTreeSet<usize> {
        edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == x {
                    Some(b)
                } else if b == x {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    };
    assert!(i < n && j < n);
    let (ni, nj) = (nb(i), nb(j));
    if ni.is_empty() || nj.is_empty() {
        return 0.0;
    }
    let share = ni.intersection(&nj).filter(|&&v| v != i && v != j).count() as f64;
    (share / ni.len() as f64).max(share / nj.len() as f64)
}

/// Textbook DBSCAN: scan points in index order and grow each new cluster with
/// a queue over density-reachable points.
pub fn brute_dbscan(x: &Array2<f64>, eps: f64, min_pts: usize) -> Vec<i64> {
    let n = x.nrows();
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                1.0 - dot <= eps
            })
            .collect()
    };
    const UNSEEN: i64 = -2;
    let mut label = vec![UNSEEN; n];
    let mut c = 0;
    for p in 0..n {
        if label[p] != UNSEEN {
            continue;
        }
        let nb = region(p);
        if nb.len() < min_pts {
            label[p] = -1;
            continue;
        }
        label[p] = c;
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if label[q] == -1 {
                label[q] = c;
            }
            if label[q] != UNSEEN {
                continue;
            }
            label[q] = c;
            let nq = region(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
        c += 1;
    }
    label
}

/// Dense `D^-1 (A + I)` from an edge list.
pub fn dense_a_hat(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    for mut r in a.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    a
}

pub fn labeling(v: Vec<i64>) -> Labeling {
    Labeling::new(v).unwrap()
}
