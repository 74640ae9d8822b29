//! Partition and retrieval metrics.
//!
//! Outliers in a predicted [`Labeling`] count as singleton clusters in every
//! partition metric. NMI uses arithmetic-mean normalization,
//! `2 I(U;V) / (H(U) + H(V))`, with natural logarithms.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::Serialize;

use crate::dataset::Labeling;
use crate::error::{Error, Result};
use crate::knn_graph::KnnGraph;

/// Summary of one labeling against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub nmi: f64,
    pub pair_precision: f64,
    pub pair_recall: f64,
    pub pair_f: f64,
    pub n_outliers: usize,
    pub graph_recall: Option<f64>,
    pub map: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(pred: &Labeling, gt: &[i64]) -> Result<Self> {
        let (pair_precision, pair_recall, pair_f) = pairwise_prf(pred, gt)?;
        Ok(Self {
            nmi: nmi(pred, gt)?,
            pair_precision,
            pair_recall,
            pair_f,
            n_outliers: pred.n_outliers(),
            graph_recall: None,
            map: None,
        })
    }
}

fn check_inputs(pred: &Labeling, gt: &[i64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(i) = gt.iter().position(|&g| g < 0) {
        return Err(Error::invalid(
            "gt",
            format!("ground truth has an outlier at index {i}"),
        ));
    }
    Ok(())
}

fn counts(ids: &[i64]) -> BTreeMap<i64, usize> {
    let mut m = BTreeMap::new();
    for &v in ids {
        *m.entry(v).or_insert(0) += 1;
    }
    m
}

fn contingency(a: &[i64], b: &[i64]) -> BTreeMap<(i64, i64), usize> {
    let mut m = BTreeMap::new();
    for (&u, &v) in a.iter().zip(b) {
        *m.entry((u, v)).or_insert(0) += 1;
    }
    m
}

fn entropy(c: &BTreeMap<i64, usize>, n: f64) -> f64 {
    c.values()
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn same_partition(a: &[i64], b: &[i64]) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter().zip(b).all(|(&u, &v)| {
        *ab.entry(u).or_insert(v) == v && *ba.entry(v).or_insert(u) == u
    })
}

/// NMI between two plain partitions (no outlier handling).
pub fn nmi_partitions(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    if same_partition(a, b) {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let ca = counts(a);
    let cb = counts(b);
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = contingency(a, b)
        .iter()
        .map(|(&(u, v), &k)| {
            let pk = k as f64 / n;
            let pu = ca[&u] as f64 / n;
            let pv = cb[&v] as f64 / n;
            pk * (pk / (pu * pv)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// NMI of a predicted labeling against ground-truth identities.
pub fn nmi(pred: &Labeling, gt: &[i64]) -> Result<f64> {
    check_inputs(pred, gt)?;
    nmi_partitions(&pred.with_singleton_outliers(), gt)
}

fn pairs(k: usize) -> u64 {
    let k = k as u64;
    k * k.saturating_sub(1) / 2
}

/// Pairwise precision, recall and F-score over all unordered sample pairs.
///
/// With no same-cluster pairs in the prediction (or the ground truth) the
/// corresponding ratio is vacuously 1.
pub fn pairwise_prf(pred: &Labeling, gt: &[i64]) -> Result<(f64, f64, f64)> {
    check_inputs(pred, gt)?;
    let p = pred.with_singleton_outliers();
    let same_pred: u64 = counts(&p).values().map(|&k| pairs(k)).sum();
    let same_gt: u64 = counts(gt).values().map(|&k| pairs(k)).sum();
    let both: u64 = contingency(&p, gt).values().map(|&k| pairs(k)).sum();
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(both, same_pred);
    let recall = ratio(both, same_gt);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f))
}

/// Fraction of same-identity pairs joined by an edge of `g`.
pub fn graph_recall(g: &KnnGraph, gt: &[i64]) -> Result<f64> {
    if gt.len() != g.n() {
        return Err(Error::Shape(format!(
            "{} ground-truth labels for a {}-node graph",
            gt.len(),
            g.n()
        )));
    }
    let positives: u64 = counts(gt).values().map(|&k| pairs(k)).sum();
    if positives == 0 {
        return Err(Error::Degenerate(
            "ground truth has no same-identity pairs".into(),
        ));
    }
    let hits = g.edges().iter().filter(|&&(i, j)| gt[i] == gt[j]).count();
    Ok(hits as f64 / positives as f64)
}

/// Average precision of one ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let total = ranked_relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / total as f64
}

/// Mean average precision of cosine-similarity retrieval.
///
/// Rows of `query` and `gallery` are assumed unit length, so the dot product is
/// the cosine similarity. Ties rank the lower gallery index first.
pub fn retrieval_map(
    query: ArrayView2<f64>,
    query_ids: &[i64],
    gallery: ArrayView2<f64>,
    gallery_ids: &[i64],
) -> Result<f64> {
    if query.nrows() != query_ids.len() || gallery.nrows() != gallery_ids.len() {
        return Err(Error::Shape("ids do not match row counts".into()));
    }
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    if query.nrows() == 0 {
        return Err(Error::Degenerate("no queries".into()));
    }
    let sims = query.dot(&gallery.t());
    let mut total = 0.0;
    for (q, &qid) in query_ids.iter().enumerate() {
        if !gallery_ids.contains(&qid) {
            return Err(Error::invalid(
                "query",
                format!("query {q} (identity {qid}) has no match in the gallery"),
            ));
        }
        let row = sims.row(q);
        let mut order: Vec<usize> = (0..gallery.nrows()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let rel: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == qid).collect();
        total += average_precision(&rel);
    }
    Ok(total / query.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(v: &[i64]) -> Labeling {
        Labeling::new(v.to_vec()).unwrap()
    }

    #[test]
    fn nmi_identical_partitions() {
        assert_eq!(nmi(&lab(&[0, 0, 1, 2]), &[5, 5, 3, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&lab(&[0, 0, 0]), &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(nmi(&lab(&[0, 1, 2]), &[2, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_single_cluster_vs_two() {
        assert_eq!(nmi(&lab(&[0, 0, 0, 0]), &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_matches_entropy_oracle() {
        // pred {0,0,1,1}, gt {0,0,0,1}; explicit counts.
        let ln = f64::ln;
        let h_u = -2.0 * 0.5 * ln(0.5);
        let h_v = -(0.75 * ln(0.75) + 0.25 * ln(0.25));
        // joint cells: (0,0)=2, (1,0)=1, (1,1)=1
        let i = 0.5 * ln(0.5 / (0.5 * 0.75))
            + 0.25 * ln(0.25 / (0.5 * 0.75))
            + 0.25 * ln(0.25 / (0.5 * 0.25));
        let expected = 2.0 * i / (h_u + h_v);
        let got = nmi(&lab(&[0, 0, 1, 1]), &[0, 0, 0, 1]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn nmi_outliers_are_singletons() {
        // all-outlier prediction against all-distinct truth is a perfect match
        assert_eq!(nmi(&lab(&[-1, -1, -1]), &[0, 1, 2]).unwrap(), 1.0);
        assert!(nmi(&lab(&[0, 0]), &[0]).is_err());
        assert!(nmi(&lab(&[0, 0]), &[0, -1]).is_err());
    }

    #[test]
    fn prf_conventions() {
        assert_eq!(
            pairwise_prf(&lab(&[0, 0, 1]), &[3, 3, 4]).unwrap(),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(
            pairwise_prf(&lab(&[0, 1, -1, 2]), &[0, 0, 1, 1]).unwrap(),
            (1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn ap_single_relevant_at_rank_k() {
        for k in 1..6 {
            let mut rel = vec![false; 6];
            rel[k - 1] = true;
            assert!((average_precision(&rel) - 1.0 / k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn map_perfect_when_duplicates_rank_first() {
        use ndarray::array;
        let q = array![[1.0, 0.0]];
        let g = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let m = retrieval_map(q.view(), &[7], g.view(), &[7, 7, 1]).unwrap();
        assert_eq!(m, 1.0);
        let err = retrieval_map(q.view(), &[9], g.view(), &[7, 7, 1]).unwrap_err();
        assert!(err.to_string().contains("query 0"));
    }
}
