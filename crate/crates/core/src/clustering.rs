//! Baseline clusterings that produce the initial, noisy pseudo labels.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::dataset::{EmbeddingSet, Labeling, OUTLIER};
use crate::error::{Error, Result};
use crate::rng;

/// DBSCAN on cosine distance `1 - f_i · f_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.4,
            min_pts: 4,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0) {
            return Err(Error::invalid("eps", format!("{} not in (0, 2]", self.eps)));
        }
        if self.min_pts < 1 {
            return Err(Error::invalid("min_pts", "must be >= 1"));
        }
        Ok(())
    }
}

/// Density clustering with `-1` for noise.
///
/// Core points have at least `min_pts` points (themselves included) within
/// `eps`. Clusters are the connected components of core points under the
/// `eps` relation, numbered by their lowest core index; a border point joins
/// the lowest-numbered cluster among the cores that reach it.
pub fn dbscan(set: &EmbeddingSet, params: DbscanParams) -> Result<Labeling> {
    params.validate()?;
    let n = set.n();
    if n == 0 {
        return Err(Error::Degenerate("no samples".into()));
    }
    let f = set.features();
    let sim = f.dot(&f.t());
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| 1.0 - sim[[i, j]] <= params.eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut labels = vec![OUTLIER; n];
    let mut next = 0i64;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != OUTLIER {
            continue;
        }
        labels[seed] = next;
        stack.push(seed);
        while let Some(u) = stack.pop() {
            for &v in &neighbors[u] {
                if core[v] && labels[v] == OUTLIER {
                    labels[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    // Border points: cores are final, so the lowest reaching cluster id is well defined.
    let border: Vec<(usize, i64)> = (0..n)
        .filter(|&i| !core[i])
        .filter_map(|i| {
            neighbors[i]
                .iter()
                .filter(|&&j| core[j])
                .map(|&j| labels[j])
                .min()
                .map(|l| (i, l))
        })
        .collect();
    for (i, l) in border {
        labels[i] = l;
    }
    Labeling::new(labels)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-iteration trace of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansTrace {
    pub labels: Labeling,
    /// Sum of squared distances to assigned centroids after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's algorithm on Euclidean distance with seeded farthest-point init.
pub fn kmeans(set: &EmbeddingSet, k: usize, seed: u64) -> Result<Labeling> {
    kmeans_trace(set, k, seed).map(|t| t.labels)
}

pub fn kmeans_trace(set: &EmbeddingSet, k: usize, seed: u64) -> Result<KmeansTrace> {
    let n = set.n();
    if k < 1 || k > n {
        return Err(Error::invalid("k", format!("{k} not in [1, {n}]")));
    }
    let x = set.features();
    let d = set.d();

    // Farthest-point initialization from a seeded first centroid.
    let mut rng = rng::seeded(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(x.row(i), x.row(best)));
        }
    }
    let mut centroids = Array2::zeros((k, d));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&x.row(i));
    }

    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(x.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            total += best_d;
        }
        objective.push(total);
        if !changed || iterations >= KMEANS_MAX_ITER {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(assign[i]).scaled_add(1.0, &x.row(i));
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let row = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&row);
            }
        }
        // Empty clusters take the point farthest from its current centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue;
                }
                let dist = sq_dist(x.row(i), centroids.row(assign[i]));
                if dist > far_d {
                    far_d = dist;
                    far = i;
                }
            }
            counts[assign[far]] -= 1;
            counts[c] = 1;
            assign[far] = c;
            centroids.row_mut(c).assign(&x.row(far));
        }
    }
    let labels = Labeling::new(assign.into_iter().map(|c| c as i64).collect())?;
    Ok(KmeansTrace {
        labels,
        objective,
        iterations,
    })
}

/// Injects label noise: `floor(flip_rate * L)` labeled samples move to a
/// uniformly random other cluster and a disjoint `floor(outlier_rate * L)`
/// become outliers, where `L` is the number of labeled samples. The outlier
/// count is capped by the labeled samples left after flipping.
pub fn corrupt_labels(lab: &Labeling, flip_rate: f64, outlier_rate: f64, seed: u64) -> Result<Labeling> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::invalid("flip_rate", format!("{flip_rate} not in [0, 1]")));
    }
    if !(0.0..=1.0).contains(&outlier_rate) {
        return Err(Error::invalid(
            "outlier_rate",
            format!("{outlier_rate} not in [0, 1]"),
        ));
    }
    let mut idx = lab.labeled_indices();
    let total = idx.len();
    let n_flip = (flip_rate * total as f64).floor() as usize;
    let n_out = ((outlier_rate * total as f64).floor() as usize).min(total - n_flip);
    let c = lab.n_clusters() as i64;
    if n_flip > 0 && c < 2 {
        return Err(Error::Degenerate(
            "cannot flip labels with fewer than 2 clusters".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    idx.shuffle(&mut rng);
    let mut out = lab.labels().to_vec();
    for &i in &idx[..n_flip] {
        let shift = rng.random_range(1..c);
        out[i] = (out[i] + shift) % c;
    }
    for &i in &idx[n_flip..n_flip + n_out] {
        out[i] = OUTLIER;
    }
    Labeling::new(out)
}
