//! One full correction pass.
//!
//! 1. joint similarity over all samples;
//! 2. a training graph over the non-outliers and an inference graph over all;
//! 3. a freshly initialized network trained on the training graph;
//! 4. edge confidences on the inference graph, pruning below `tau1`;
//! 5. node connectivity on the pruned graph, pruning below `tau2`;
//! 6. connected components become the corrected labels.
//!
//! A node that ends up isolated keeps `-1` if it was an outlier and otherwise
//! becomes a singleton cluster, so correction never creates outliers.

use ndarray::Array2;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{EmbeddingSet, Labeling, OUTLIER};
use crate::error::{Error, Result};
use crate::glc_net::{gcn_input, predict_edges, train_glc, GlcModel, TrainReport};
use crate::knn_graph::{build_knn_graph, connected_components, joint_similarity, node_connectivity, KnnGraph};
use crate::metrics;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub corrected: Labeling,
    pub edges_total: usize,
    pub edges_removed_conf: usize,
    pub edges_removed_nc: usize,
    pub n_outliers_before: usize,
    pub n_outliers_after: usize,
    pub train_report: TrainReport,
    /// Inference-graph edges that survived both pruning steps.
    pub kept: Vec<bool>,
}

/// Counts and loss summary, for JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionSummary {
    pub n_samples: usize,
    pub n_clusters_before: usize,
    pub n_clusters_after: usize,
    pub n_outliers_before: usize,
    pub n_outliers_after: usize,
    pub edges_total: usize,
    pub edges_removed_conf: usize,
    pub edges_removed_nc: usize,
    pub train_iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl CorrectionResult {
    pub fn summary(&self, before: &Labeling) -> CorrectionSummary {
        CorrectionSummary {
            n_samples: self.corrected.len(),
            n_clusters_before: before.n_clusters(),
            n_clusters_after: self.corrected.n_clusters(),
            n_outliers_before: self.n_outliers_before,
            n_outliers_after: self.n_outliers_after,
            edges_total: self.edges_total,
            edges_removed_conf: self.edges_removed_conf,
            edges_removed_nc: self.edges_removed_nc,
            train_iterations: self.train_report.iterations,
            initial_loss: self.train_report.losses.first().copied().unwrap_or(f64::NAN),
            final_loss: self.train_report.final_loss,
        }
    }
}

/// Graphs for one correction pass.
#[derive(Debug, Clone)]
pub struct CorrectionGraphs {
    pub similarity: Array2<f64>,
    pub train: KnnGraph,
    pub inference: KnnGraph,
}

/// Steps 1-2: joint similarity and the two kNN graphs.
pub fn build_graphs(set: &EmbeddingSet, lab: &Labeling, cfg: &RunConfig) -> Result<CorrectionGraphs> {
    if lab.len() != set.n() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            lab.len(),
            set.n()
        )));
    }
    let similarity = joint_similarity(set, cfg.lambda)?;
    let labeled: Vec<bool> = (0..set.n()).map(|i| !lab.is_outlier(i)).collect();
    let train = build_knn_graph(&similarity, cfg.k, &labeled)?;
    let inference = build_knn_graph(&similarity, cfg.k, &vec![true; set.n()])?;
    Ok(CorrectionGraphs {
        similarity,
        train,
        inference,
    })
}

/// A trained network with its inference-graph confidences; thresholds can be
/// applied repeatedly without retraining.
#[derive(Debug, Clone)]
pub struct FittedCorrection {
    pub graphs: CorrectionGraphs,
    pub model: GlcModel,
    pub confidence: Vec<f64>,
    pub report: TrainReport,
    input: Labeling,
}

fn check_clusters(lab: &Labeling) -> Result<()> {
    if lab.n_clusters() < 2 {
        return Err(Error::Degenerate(format!(
            "{} cluster(s) among non-outliers, need at least 2",
            lab.n_clusters()
        )));
    }
    Ok(())
}

impl FittedCorrection {
    /// Steps 1-4 without thresholds.
    pub fn fit(set: &EmbeddingSet, lab: &Labeling, cfg: &RunConfig, seed: u64) -> Result<Self> {
        check_clusters(lab)?;
        let graphs = build_graphs(set, lab, cfg)?;
        let (model, report) = train_glc(&graphs.train, set, lab, cfg, seed)?;
        Self::with_model(set, lab, graphs, model, report)
    }

    /// Wraps an already trained model.
    pub fn with_model(
        set: &EmbeddingSet,
        lab: &Labeling,
        graphs: CorrectionGraphs,
        model: GlcModel,
        report: TrainReport,
    ) -> Result<Self> {
        let confidence = predict_edges(&model, &graphs.inference, &gcn_input(set.features()))?;
        Ok(Self {
            graphs,
            model,
            confidence,
            report,
            input: lab.clone(),
        })
    }

    /// Steps 4-6 for the given thresholds.
    pub fn apply(&self, tau1: f64, tau2: f64) -> CorrectionResult {
        let g = &self.graphs.inference;
        let keep_conf: Vec<bool> = self.confidence.iter().map(|&p| p >= tau1).collect();
        let removed_conf = keep_conf.iter().filter(|&&k| !k).count();
        let pruned = g.retain(&keep_conf);

        let keep_nc: Vec<bool> = pruned
            .edges()
            .iter()
            .map(|&(i, j)| node_connectivity(&pruned, i, j) >= tau2)
            .collect();
        let removed_nc = keep_nc.iter().filter(|&&k| !k).count();
        let refined = pruned.retain(&keep_nc);

        let mut kept = vec![false; g.n_edges()];
        let mut it = keep_nc.iter();
        for (slot, &k) in kept.iter_mut().zip(&keep_conf) {
            if k {
                *slot = *it.next().expect("one flag per surviving edge");
            }
        }

        let comps = connected_components(&refined);
        let labels: Vec<i64> = (0..g.n())
            .map(|i| {
                if refined.degree(i) == 0 && self.input.is_outlier(i) {
                    OUTLIER
                } else {
                    comps.labels()[i]
                }
            })
            .collect();
        let corrected = Labeling::new(labels).expect("component labels are valid");
        CorrectionResult {
            n_outliers_before: self.input.n_outliers(),
            n_outliers_after: corrected.n_outliers(),
            corrected,
            edges_total: g.n_edges(),
            edges_removed_conf: removed_conf,
            edges_removed_nc: removed_nc,
            train_report: self.report.clone(),
            kept,
        }
    }
}

/// Full correction pass with the thresholds in `cfg`.
pub fn correct(set: &EmbeddingSet, lab: &Labeling, cfg: &RunConfig, seed: u64) -> Result<CorrectionResult> {
    Ok(FittedCorrection::fit(set, lab, cfg, seed)?.apply(cfg.tau1, cfg.tau2))
}

/// One grid cell of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub tau1: f64,
    pub tau2: f64,
    pub nmi: f64,
    pub n_clusters: usize,
    pub n_outliers: usize,
    pub edges_removed_conf: usize,
    pub edges_removed_nc: usize,
}

/// NMI surface over `tau1s x tau2s` from a single trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid {
    pub tau1s: Vec<f64>,
    pub tau2s: Vec<f64>,
    /// `nmi[[a, b]]` is the score at `(tau1s[a], tau2s[b])`.
    pub nmi: Array2<f64>,
    pub cells: Vec<GridCell>,
}

pub fn threshold_grid(
    set: &EmbeddingSet,
    lab: &Labeling,
    cfg: &RunConfig,
    tau1s: &[f64],
    tau2s: &[f64],
    seed: u64,
) -> Result<ThresholdGrid> {
    let gt = set
        .gt_labels()
        .ok_or_else(|| Error::invalid("gt_labels", "threshold grid needs ground truth"))?;
    for &t in tau1s.iter().chain(tau2s) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("tau", format!("{t} not in [0, 1]")));
        }
    }
    let fitted = FittedCorrection::fit(set, lab, cfg, seed)?;
    let mut nmi = Array2::zeros((tau1s.len(), tau2s.len()));
    let mut cells = Vec::with_capacity(tau1s.len() * tau2s.len());
    for (a, &t1) in tau1s.iter().enumerate() {
        for (b, &t2) in tau2s.iter().enumerate() {
            let r = fitted.apply(t1, t2);
            let score = metrics::nmi(&r.corrected, gt)?;
            nmi[[a, b]] = score;
            cells.push(GridCell {
                tau1: t1,
                tau2: t2,
                nmi: score,
                n_clusters: r.corrected.n_clusters(),
                n_outliers: r.n_outliers_after,
                edges_removed_conf: r.edges_removed_conf,
                edges_removed_nc: r.edges_removed_nc,
            });
        }
    }
    Ok(ThresholdGrid {
        tau1s: tau1s.to_vec(),
        tau2s: tau2s.to_vec(),
        nmi,
        cells,
    })
}
