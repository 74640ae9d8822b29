//! A small clustering / training loop on synthetic data.
//!
//! The extractor is linear: `f = normalize(x W)`, with a linear softmax
//! classifier over the current pseudo labels. Each epoch extracts features,
//! clusters them with DBSCAN, optionally corrects the labels on schedule, and
//! trains the extractor on the result. Once, at `floor(p_r * T)`, the extractor
//! is re-initialized before that epoch's training.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::clustering::{corrupt_labels, dbscan};
use crate::config::RunConfig;
use crate::correction::correct;
use crate::dataset::{generate_synthetic, normalize_rows, EmbeddingSet, Labeling, RawDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, retrieval_map};
use crate::rng;

/// Linear embedding plus linear classifier. `c == 0` until the first training.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExtractor {
    pub w_embed: Array2<f64>,
    pub w_cls: Array2<f64>,
    pub b_cls: Array1<f64>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Random matrix with orthonormal columns (or rows, when `rows < cols`).
fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::zeros((tall, short));
    let mut c = 0;
    while c < short {
        let mut v: Array1<f64> = (0..tall).map(|_| StandardNormal.sample(rng)).collect();
        for p in 0..c {
            let proj = q.column(p).dot(&v);
            v.scaled_add(-proj, &q.column(p));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.column_mut(c).assign(&(v / norm));
            c += 1;
        }
    }
    if rows >= cols {
        q
    } else {
        q.reversed_axes()
    }
}

impl ToyExtractor {
    /// Orthogonal embedding (geometry-preserving when `d <= d_raw`), no classifier.
    pub fn new(d_raw: usize, d: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        Self {
            w_embed: orthogonal(&mut rng, d_raw, d),
            w_cls: Array2::zeros((d, 0)),
            b_cls: Array1::zeros(0),
        }
    }

    pub fn d_raw(&self) -> usize {
        self.w_embed.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_embed.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.w_cls.ncols()
    }

    fn with_fresh_classifier(&self, c: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        Self {
            w_embed: self.w_embed.clone(),
            w_cls: uniform(&mut rng, self.d(), c),
            b_cls: Array1::zeros(c),
        }
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    z
}

struct ExtractPass {
    /// Unnormalized embeddings `x W`.
    u: Array2<f64>,
    norms: Array1<f64>,
    f: Array2<f64>,
    probs: Option<Array2<f64>>,
}

fn extract_pass(ext: &ToyExtractor, x: &Array2<f64>) -> Result<ExtractPass> {
    if x.ncols() != ext.d_raw() {
        return Err(Error::Shape(format!(
            "input dim {} but extractor expects {}",
            x.ncols(),
            ext.d_raw()
        )));
    }
    let u = x.dot(&ext.w_embed);
    let norms = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut f = u.clone();
    normalize_rows(&mut f)?;
    let probs = (ext.n_classes() > 0).then(|| softmax_rows(f.dot(&ext.w_cls) + &ext.b_cls));
    Ok(ExtractPass { u, norms, f, probs })
}

/// Unit features and, once a classifier exists, softmax scores.
pub fn extract(ext: &ToyExtractor, raw: &RawDataset) -> Result<EmbeddingSet> {
    let pass = extract_pass(ext, &raw.inputs)?;
    EmbeddingSet::new(
        pass.f,
        pass.probs,
        raw.cameras.clone(),
        Some(raw.gt_labels.clone()),
    )
}

/// Loss and gradients `(d w_embed, d w_cls, d b_cls)`.
pub type ExtractorGrad = (f64, Array2<f64>, Array2<f64>, Array1<f64>);

/// Mean cross-entropy over labeled samples and its gradients
/// `(d w_embed, d w_cls, d b_cls)`.
pub fn extractor_loss_and_grad(
    ext: &ToyExtractor,
    x: &Array2<f64>,
    lab: &Labeling,
) -> Result<ExtractorGrad> {
    if lab.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            lab.len(),
            x.nrows()
        )));
    }
    if lab.n_clusters() != ext.n_classes() {
        return Err(Error::Shape(format!(
            "{} clusters for a {}-way classifier",
            lab.n_clusters(),
            ext.n_classes()
        )));
    }
    let labeled = lab.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::Degenerate("every sample is an outlier".into()));
    }
    let pass = extract_pass(ext, x)?;
    let probs = pass.probs.expect("classifier present");
    let scale = 1.0 / labeled.len() as f64;

    let mut dz = Array2::<f64>::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for &i in &labeled {
        let y = lab.labels()[i] as usize;
        loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        let mut row = dz.row_mut(i);
        row.assign(&probs.row(i));
        row[y] -= 1.0;
        row.mapv_inplace(|v| v * scale);
    }
    let d_wcls = pass.f.t().dot(&dz);
    let d_bcls = dz.sum_axis(Axis(0));
    let df = dz.dot(&ext.w_cls.t());
    // d(u/|u|) = (df - f (f . df)) / |u|
    let mut du = df;
    for i in 0..du.nrows() {
        let f = pass.f.row(i);
        let proj = f.dot(&du.row(i));
        let norm = pass.norms[i];
        let mut row = du.row_mut(i);
        row.scaled_add(-proj, &f);
        row.mapv_inplace(|v| v / norm);
    }
    debug_assert_eq!(pass.u.nrows(), du.nrows());
    let d_embed = x.t().dot(&du);
    Ok((loss * scale, d_embed, d_wcls, d_bcls))
}

/// Full-batch gradient descent on softmax cross-entropy over non-outliers.
///
/// The classifier is rebuilt from a fresh seeded initialization on every call
/// with `steps > 0`; cluster ids carry no meaning across clusterings.
pub fn train_extractor(
    ext: &ToyExtractor,
    raw: &RawDataset,
    lab: &Labeling,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyExtractor> {
    if lab.n_clusters() == 0 {
        return Err(Error::Degenerate("every sample is an outlier".into()));
    }
    if steps == 0 {
        return Ok(ext.clone());
    }
    let mut model = ext.with_fresh_classifier(lab.n_clusters(), seed);
    for _ in 0..steps {
        let (_, de, dw, db) = extractor_loss_and_grad(&model, &raw.inputs, lab)?;
        model.w_embed.scaled_add(-lr, &de);
        model.w_cls.scaled_add(-lr, &dw);
        model.b_cls.scaled_add(-lr, &db);
    }
    Ok(model)
}

/// Metrics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nmi: f64,
    pub pair_f: f64,
    pub n_outliers: usize,
    pub map: Option<f64>,
    pub edges_removed_conf: usize,
    pub edges_removed_nc: usize,
    pub restarted: bool,
    pub glc_applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Labels the extractor was trained on at each epoch.
    pub labels: Vec<Labeling>,
}

pub const HISTORY_HEADER: &str =
    "epoch,nmi,pair_f,n_outliers,map,edges_removed_conf,edges_removed_nc,restarted,glc_applied";

impl History {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("at least one epoch")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let map = r.map.map_or_else(String::new, |m| format!("{m:.9}"));
            out.push_str(&format!(
                "{},{:.9},{:.9},{},{},{},{},{},{}\n",
                r.epoch,
                r.nmi,
                r.pair_f,
                r.n_outliers,
                map,
                r.edges_removed_conf,
                r.edges_removed_nc,
                u8::from(r.restarted),
                u8::from(r.glc_applied)
            ));
        }
        out
    }
}

/// mAP with the first sample of each identity as query and every other sample
/// as gallery. `None` when no identity has two samples.
pub fn self_retrieval_map(set: &EmbeddingSet) -> Result<Option<f64>> {
    let gt = set
        .gt_labels()
        .ok_or_else(|| Error::invalid("gt_labels", "retrieval needs ground truth"))?;
    let mut counts = std::collections::HashMap::new();
    for &g in gt {
        *counts.entry(g).or_insert(0usize) += 1;
    }
    let mut seen = std::collections::HashSet::new();
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (i, &g) in gt.iter().enumerate() {
        if counts[&g] >= 2 && seen.insert(g) {
            queries.push(i);
        } else {
            gallery.push(i);
        }
    }
    if queries.is_empty() {
        return Ok(None);
    }
    let q = set.features().select(Axis(0), &queries);
    let gal = set.features().select(Axis(0), &gallery);
    let qid: Vec<i64> = queries.iter().map(|&i| gt[i]).collect();
    let gid: Vec<i64> = gallery.iter().map(|&i| gt[i]).collect();
    retrieval_map(q.view(), &qid, gal.view(), &gid).map(Some)
}

const TAG_EXTRACTOR: u64 = 1;
const TAG_GLC: u64 = 1_000;
const TAG_RESTART: u64 = 2_000;
const TAG_TRAIN: u64 = 3_000;
const TAG_CORRUPT: u64 = 4_000;

/// Runs `cfg.epochs` epochs of cluster → (correct) → train.
///
/// Correction needs scores when `lambda < 1`; before the first classifier is
/// trained the graph falls back to feature similarity only.
pub fn run_loop(raw: &RawDataset, cfg: &RunConfig, use_glc: bool, seed: u64) -> Result<History> {
    cfg.validate()?;
    let lc = cfg.loop_config();
    let params = cfg.dbscan_params();
    let mut ext = ToyExtractor::new(raw.inputs.ncols(), lc.embed_dim, rng::derive(seed, TAG_EXTRACTOR));
    let mut records = Vec::with_capacity(lc.epochs);
    let mut history_labels = Vec::with_capacity(lc.epochs);

    for t in 0..lc.epochs {
        let set = extract(&ext, raw)?;
        let mut lab = dbscan(&set, params)?;
        let (mut removed_conf, mut removed_nc, mut applied) = (0, 0, false);
        if use_glc && lc.applies_glc(t) && lab.n_clusters() >= 2 {
            let mut step_cfg = cfg.clone();
            if set.scores().is_none() {
                step_cfg.lambda = 1.0;
            }
            let res = correct(&set, &lab, &step_cfg, rng::derive(seed, TAG_GLC + t as u64))?;
            removed_conf = res.edges_removed_conf;
            removed_nc = res.edges_removed_nc;
            lab = res.corrected;
            applied = true;
        }

        let restarted = t == lc.restart_epoch() && t < lc.epochs;
        if restarted {
            ext = ToyExtractor::new(
                raw.inputs.ncols(),
                lc.embed_dim,
                rng::derive(seed, TAG_RESTART + t as u64),
            );
        }

        let (_, _, pair_f) = metrics::pairwise_prf(&lab, &raw.gt_labels)?;
        records.push(EpochRecord {
            epoch: t,
            nmi: metrics::nmi(&lab, &raw.gt_labels)?,
            pair_f,
            n_outliers: lab.n_outliers(),
            map: self_retrieval_map(&set)?,
            edges_removed_conf: removed_conf,
            edges_removed_nc: removed_nc,
            restarted,
            glc_applied: applied,
        });

        if lab.n_clusters() > 0 {
            ext = train_extractor(
                &ext,
                raw,
                &lab,
                lc.inner_steps,
                lc.extractor_lr,
                rng::derive(seed, TAG_TRAIN + t as u64),
            )?;
        }
        history_labels.push(lab);
    }
    Ok(History {
        records,
        labels: history_labels,
    })
}

/// Fixed single-epoch scenario for correction experiments.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub raw: RawDataset,
    /// Features and scores after one epoch of extractor training.
    pub set: EmbeddingSet,
    /// DBSCAN labels on `set`.
    pub clustered: Labeling,
    /// `clustered` with `flip_rate` / `outlier_rate` noise injected.
    pub noisy: Labeling,
}

/// Generates data from `cfg` (seeded by `cfg.seed`), trains a fresh extractor
/// for one epoch on DBSCAN labels, re-clusters, and corrupts the result.
pub fn build_scenario(cfg: &RunConfig) -> Result<Scenario> {
    cfg.validate()?;
    let lc = cfg.loop_config();
    let raw = generate_synthetic(&cfg.synth_spec())?;
    let ext = ToyExtractor::new(raw.inputs.ncols(), lc.embed_dim, rng::derive(cfg.seed, TAG_EXTRACTOR));
    let first = dbscan(&extract(&ext, &raw)?, cfg.dbscan_params())?;
    let ext = train_extractor(
        &ext,
        &raw,
        &first,
        lc.inner_steps,
        lc.extractor_lr,
        rng::derive(cfg.seed, TAG_TRAIN),
    )?;
    let set = extract(&ext, &raw)?;
    let clustered = dbscan(&set, cfg.dbscan_params())?;
    let noisy = corrupt_labels(
        &clustered,
        cfg.flip_rate,
        cfg.outlier_rate,
        rng::derive(cfg.seed, TAG_CORRUPT),
    )?;
    Ok(Scenario {
        raw,
        set,
        clustered,
        noisy,
    })
}
