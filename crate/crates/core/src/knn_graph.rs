//! Joint-similarity kNN graphs.
//!
//! The similarity blends feature cosine similarity with score similarity,
//! `lambda * F F^T + (1 - lambda) * S S^T`. Each masked-in node keeps its `k`
//! most similar masked-in nodes, and an edge exists if either endpoint lists
//! the other.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::dataset::{EmbeddingSet, Labeling, OUTLIER};
use crate::error::{Error, Result};

/// Undirected graph over `n` nodes stored as sorted unique pairs `(i, j)`, `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    edges: Vec<(usize, usize)>,
    edge_sim: Vec<f64>,
    node_mask: Vec<bool>,
    adj: Vec<Vec<usize>>,
}

impl KnnGraph {
    /// Builds a graph from arbitrary pairs; pairs are oriented, sorted and
    /// deduplicated (the first similarity seen for a pair wins).
    pub fn from_edges(
        n: usize,
        pairs: impl IntoIterator<Item = (usize, usize, f64)>,
        node_mask: Vec<bool>,
        k: usize,
    ) -> Result<Self> {
        if node_mask.len() != n {
            return Err(Error::Shape(format!(
                "mask of length {} for {n} nodes",
                node_mask.len()
            )));
        }
        let mut list: Vec<(usize, usize, f64)> = Vec::new();
        for (a, b, s) in pairs {
            if a == b {
                return Err(Error::invalid("edges", format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::invalid(
                    "edges",
                    format!("edge ({a}, {b}) out of range for {n} nodes"),
                ));
            }
            if !node_mask[a] || !node_mask[b] {
                return Err(Error::invalid(
                    "edges",
                    format!("edge ({a}, {b}) touches a masked-out node"),
                ));
            }
            list.push((a.min(b), a.max(b), s));
        }
        list.sort_by_key(|&(a, b, _)| (a, b));
        list.dedup_by_key(|e| (e.0, e.1));
        let edges: Vec<(usize, usize)> = list.iter().map(|&(a, b, _)| (a, b)).collect();
        let edge_sim = list.iter().map(|e| e.2).collect();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        Ok(Self {
            n,
            k,
            edges,
            edge_sim,
            node_mask,
            adj,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_sim(&self) -> &[f64] {
        &self.edge_sim
    }

    pub fn node_mask(&self) -> &[bool] {
        &self.node_mask
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor list of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&j).is_ok()
    }

    /// Sub-graph keeping the edges whose flag in `keep` is set.
    pub fn retain(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.edges.len());
        let pairs = self
            .edges
            .iter()
            .zip(&self.edge_sim)
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|((&(a, b), &s), _)| (a, b, s));
        Self::from_edges(self.n, pairs, self.node_mask.clone(), self.k)
            .expect("subset of a valid graph")
    }
}

/// `lambda * F F^T + (1 - lambda) * S S^T` over all samples.
pub fn joint_similarity(set: &EmbeddingSet, lambda: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} not in [0, 1]")));
    }
    let f = set.features();
    let feat_sim = f.dot(&f.t());
    if lambda == 1.0 {
        return Ok(feat_sim);
    }
    let s = set.scores().ok_or_else(|| {
        Error::invalid("lambda", "scores are required when lambda < 1")
    })?;
    let score_sim = s.dot(&s.t());
    Ok(feat_sim * lambda + score_sim * (1.0 - lambda))
}

/// Symmetrized kNN graph over the masked-in nodes of `sim`.
///
/// Ties in similarity go to the lower node index; `k` is clamped to the number
/// of masked-in nodes minus one.
pub fn build_knn_graph(sim: &Array2<f64>, k: usize, node_mask: &[bool]) -> Result<KnnGraph> {
    let n = sim.nrows();
    if sim.ncols() != n {
        return Err(Error::Shape(format!("similarity is {}x{}", n, sim.ncols())));
    }
    if node_mask.len() != n {
        return Err(Error::Shape(format!(
            "mask of length {} for {n} nodes",
            node_mask.len()
        )));
    }
    if k < 1 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let members: Vec<usize> = (0..n).filter(|&i| node_mask[i]).collect();
    if members.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} masked-in nodes, need at least 2",
            members.len()
        )));
    }
    let k_eff = k.min(members.len() - 1);
    let mut pairs = Vec::with_capacity(members.len() * k_eff);
    let mut cand: Vec<usize> = Vec::with_capacity(members.len());
    for &i in &members {
        cand.clear();
        cand.extend(members.iter().copied().filter(|&j| j != i));
        let row = sim.row(i);
        let by_sim = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k_eff < cand.len() {
            cand.select_nth_unstable_by(k_eff - 1, by_sim);
            cand.truncate(k_eff);
        }
        for &j in &cand {
            let (a, b) = (i.min(j), i.max(j));
            pairs.push((a, b, sim[[a, b]]));
        }
    }
    KnnGraph::from_edges(n, pairs, node_mask.to_vec(), k)
}

/// Row-normalized `(A + I)`, stored by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `(column, value)` entries of row `i`, column-sorted.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    /// Dense copy, for tests and small graphs.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// `Â · h`
    pub fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        assert_eq!(h.nrows(), self.n);
        let mut out = Array2::zeros(h.raw_dim());
        for i in 0..self.n {
            let mut acc = out.row_mut(i);
            for (j, v) in self.row(i) {
                acc.scaled_add(v, &h.row(j));
            }
        }
        out
    }

    /// `Âᵀ · g`
    pub fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(g.nrows(), self.n);
        let mut out = Array2::zeros(g.raw_dim());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out.row_mut(j).scaled_add(v, &g.row(i));
            }
        }
        out
    }
}

/// `D̂⁻¹ (A + I)` with `D̂_ii = 1 + degree(i)`; every row sums to one.
pub fn normalized_adjacency(g: &KnnGraph) -> NormalizedAdjacency {
    let mut indptr = Vec::with_capacity(g.n + 1);
    let mut indices = Vec::with_capacity(g.n + 2 * g.edges.len());
    let mut values = Vec::with_capacity(indices.capacity());
    indptr.push(0);
    for i in 0..g.n {
        let w = 1.0 / (1 + g.degree(i)) as f64;
        let nb = g.neighbors(i);
        let split = nb.partition_point(|&j| j < i);
        for &j in &nb[..split] {
            indices.push(j);
            values.push(w);
        }
        indices.push(i);
        values.push(w);
        for &j in &nb[split..] {
            indices.push(j);
            values.push(w);
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        n: g.n,
        indptr,
        indices,
        values,
    }
}

fn shared_neighbors(a: &[usize], b: &[usize], skip: (usize, usize)) -> usize {
    let (mut x, mut y, mut count) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                if a[x] != skip.0 && a[x] != skip.1 {
                    count += 1;
                }
                x += 1;
                y += 1;
            }
        }
    }
    count
}

/// Shared-neighbor ratio `max(share / deg(i), share / deg(j))`.
///
/// The endpoints never count as shared neighbors; degrees count every incident
/// edge, including `(i, j)` itself. Zero when either degree is zero.
pub fn node_connectivity(g: &KnnGraph, i: usize, j: usize) -> f64 {
    let (di, dj) = (g.degree(i), g.degree(j));
    if di == 0 || dj == 0 {
        return 0.0;
    }
    let share = shared_neighbors(g.neighbors(i), g.neighbors(j), (i, j)) as f64;
    (share / di as f64).max(share / dj as f64)
}

/// Component labels for masked-in nodes (numbered by smallest member index);
/// masked-out nodes get `-1`.
pub fn connected_components(g: &KnnGraph) -> Labeling {
    let mut labels = vec![OUTLIER; g.n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..g.n {
        if !g.node_mask[start] || labels[start] != OUTLIER {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if labels[v] == OUTLIER {
                    labels[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    Labeling::new(labels).expect("component ids are valid labels")
}

/// Writes `i j sim confidence` lines (confidence `nan` when absent).
pub fn save_graph(g: &KnnGraph, confidence: Option<&[f64]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "# nodes {}", g.n).map_err(io)?;
    for (e, (&(i, j), &s)) in g.edges.iter().zip(&g.edge_sim).enumerate() {
        let c = confidence.map_or(f64::NAN, |c| c[e]);
        writeln!(w, "{i} {j} {s:.8e} {c:.8e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an edge list written by [`save_graph`]; every node is masked in.
pub fn load_graph(path: impl AsRef<Path>) -> Result<KnnGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        reason,
    };
    let mut n = None;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("nodes") {
                n = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| perr(lineno, format!("bad node count `{}`", v.trim())))?,
                );
            }
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(perr(lineno, format!("expected 4 fields, found {}", parts.len())));
        }
        let i: usize = parts[0]
            .parse()
            .map_err(|_| perr(lineno, format!("bad node `{}`", parts[0])))?;
        let j: usize = parts[1]
            .parse()
            .map_err(|_| perr(lineno, format!("bad node `{}`", parts[1])))?;
        let s: f64 = parts[2]
            .parse()
            .map_err(|_| perr(lineno, format!("bad similarity `{}`", parts[2])))?;
        pairs.push((i, j, s));
    }
    let n = n.ok_or_else(|| perr(1, "missing `# nodes N` header".into()))?;
    KnnGraph::from_edges(n, pairs, vec![true; n], 0).map_err(|e| perr(0, e.to_string()))
}
