//! The correction network: residual GCN layers, a symmetric edge classifier,
//! focal loss, and full-batch gradient descent under a fixed iteration budget.
//!
//! Each layer maps `H -> relu([H | Â H] W)`. An edge `(i, j)` is scored by
//! `sigmoid([|h_i - h_j| | h_i * h_j] · w + b)`, which is symmetric in its
//! endpoints. Gradients are derived by hand; [`grad_check`] compares them with
//! central finite differences.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{EmbeddingSet, Labeling};
use crate::error::{Error, Result};
use crate::knn_graph::{normalized_adjacency, KnnGraph, NormalizedAdjacency};
use crate::rng;

/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Parameters of the correction network.
#[derive(Debug, Clone, PartialEq)]
pub struct GlcModel {
    /// One `(2 * d_in) x d_h` matrix per GCN layer.
    pub layers: Vec<Array2<f64>>,
    /// Edge classifier weights over `[|h_i - h_j| | h_i * h_j]`.
    pub w_edge: Array1<f64>,
    pub b_edge: f64,
    pub seed: u64,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl GlcModel {
    /// Glorot-uniform weights, zero bias.
    pub fn init(d_in: usize, d_h: usize, n_layers: usize, seed: u64) -> Result<Self> {
        Self::check_dims(d_in, d_h, n_layers)?;
        let mut rng = rng::seeded(seed);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let din = if l == 0 { d_in } else { d_h };
            layers.push(glorot(&mut rng, 2 * din, d_h, 2 * din, d_h));
        }
        let w_edge = glorot(&mut rng, 2 * d_h, 1, 2 * d_h, 1).column(0).to_owned();
        Ok(Self {
            layers,
            w_edge,
            b_edge: 0.0,
            seed,
        })
    }

    pub fn zeros(d_in: usize, d_h: usize, n_layers: usize) -> Result<Self> {
        Self::check_dims(d_in, d_h, n_layers)?;
        let layers = (0..n_layers)
            .map(|l| Array2::zeros((2 * if l == 0 { d_in } else { d_h }, d_h)))
            .collect();
        Ok(Self {
            layers,
            w_edge: Array1::zeros(2 * d_h),
            b_edge: 0.0,
            seed: 0,
        })
    }

    fn check_dims(d_in: usize, d_h: usize, n_layers: usize) -> Result<()> {
        if d_in == 0 || d_h == 0 {
            return Err(Error::invalid("d_h", "dimensions must be positive"));
        }
        if n_layers == 0 {
            return Err(Error::invalid("gcn_layers", "must be >= 1"));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].nrows() / 2
    }

    pub fn d_h(&self) -> usize {
        self.w_edge.len() / 2
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum::<usize>() + self.w_edge.len() + 1
    }

    /// Flat view of every parameter: layers row-major, edge weights, bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for w in &self.layers {
            v.extend(w.iter().copied());
        }
        v.extend(self.w_edge.iter().copied());
        v.push(self.b_edge);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params());
        let mut it = v.iter().copied();
        for w in &mut self.layers {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        self.w_edge.iter_mut().for_each(|x| *x = it.next().unwrap());
        self.b_edge = it.next().unwrap();
    }

    fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Text dump: shapes followed by row-major weights, 9 significant digits.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "layers {}", self.layers.len()).map_err(io)?;
        for m in &self.layers {
            writeln!(w, "{} {}", m.nrows(), m.ncols()).map_err(io)?;
            for row in m.outer_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
        writeln!(w, "edge {}", self.w_edge.len()).map_err(io)?;
        let line: Vec<String> = self.w_edge.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
        writeln!(w, "bias {:.8e}", self.b_edge).map_err(io)?;
        w.flush().map_err(io)
    }
}

struct Forward {
    /// `[H_l | Â H_l]` per layer.
    concat: Vec<Array2<f64>>,
    /// Pre-activation `[H_l | Â H_l] W_l` per layer.
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

fn forward(model: &GlcModel, a_hat: &NormalizedAdjacency, h0: &Array2<f64>) -> Result<Forward> {
    if h0.nrows() != a_hat.n() {
        return Err(Error::Shape(format!(
            "{} feature rows for a {}-node adjacency",
            h0.nrows(),
            a_hat.n()
        )));
    }
    if h0.ncols() != model.d_in() {
        return Err(Error::Shape(format!(
            "feature dim {} but model expects {}",
            h0.ncols(),
            model.d_in()
        )));
    }
    let mut concat = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut h = h0.clone();
    for w in &model.layers {
        let agg = a_hat.apply(&h);
        let cat = ndarray::concatenate(Axis(1), &[h.view(), agg.view()]).expect("equal rows");
        let z = cat.dot(w);
        h = z.mapv(|v| v.max(0.0));
        concat.push(cat);
        pre.push(z);
    }
    Ok(Forward { concat, pre, out: h })
}

/// Network input for a unit feature matrix: rows scaled by `sqrt(d)` so each
/// coordinate has roughly unit variance.
pub fn gcn_input(f: &Array2<f64>) -> Array2<f64> {
    f * (f.ncols() as f64).sqrt()
}

/// Enhanced node features after every GCN layer.
pub fn gcn_forward(model: &GlcModel, a_hat: &NormalizedAdjacency, h0: &Array2<f64>) -> Result<Array2<f64>> {
    forward(model, a_hat, h0).map(|f| f.out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn edge_logit_rows(w: &Array1<f64>, b: f64, hi: &[f64], hj: &[f64]) -> f64 {
    let d = hi.len();
    let (w_abs, w_mul) = w.as_slice().expect("contiguous").split_at(d);
    let mut z = b;
    for c in 0..d {
        z += (hi[c] - hj[c]).abs() * w_abs[c] + hi[c] * hj[c] * w_mul[c];
    }
    z
}

fn edge_logit(model: &GlcModel, h: &Array2<f64>, i: usize, j: usize) -> f64 {
    let (hi, hj) = (h.row(i), h.row(j));
    match (hi.as_slice(), hj.as_slice()) {
        (Some(a), Some(b)) => edge_logit_rows(&model.w_edge, model.b_edge, a, b),
        _ => edge_logit_rows(&model.w_edge, model.b_edge, &hi.to_vec(), &hj.to_vec()),
    }
}

/// Probability that `(i, j)` joins samples of the same cluster.
pub fn edge_confidence(model: &GlcModel, h: &Array2<f64>, i: usize, j: usize) -> f64 {
    sigmoid(edge_logit(model, h, i, j))
}

/// Confidence of every edge of `g`, in edge order.
pub fn predict_edges(model: &GlcModel, g: &KnnGraph, h0: &Array2<f64>) -> Result<Vec<f64>> {
    let h = gcn_forward(model, &normalized_adjacency(g), h0)?;
    Ok(g.edges()
        .iter()
        .map(|&(i, j)| edge_confidence(model, &h, i, j))
        .collect())
}

/// Training edges with binary same-cluster labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeLabelSet {
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
}

impl EdgeLabelSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn n_negative(&self) -> usize {
        self.len() - self.n_positive()
    }
}

/// Labels each edge positive iff its endpoints share a pseudo label; edges
/// touching an outlier are dropped.
pub fn make_edge_labels(g: &KnnGraph, lab: &Labeling) -> Result<EdgeLabelSet> {
    if lab.len() != g.n() {
        return Err(Error::Shape(format!(
            "{} labels for a {}-node graph",
            lab.len(),
            g.n()
        )));
    }
    let y = lab.labels();
    let (edges, labels) = g
        .edges()
        .iter()
        .filter(|&&(i, j)| !lab.is_outlier(i) && !lab.is_outlier(j))
        .map(|&(i, j)| ((i, j), y[i] == y[j]))
        .unzip();
    Ok(EdgeLabelSet { edges, labels })
}

/// Per-edge focal term and its derivative with respect to the logit.
fn focal_term(p: f64, positive: bool, gamma: f64) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = 1.0 - p;
    if positive {
        let loss = -q.powf(gamma) * p.ln();
        let dz = gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + 1.0);
        (loss, dz)
    } else {
        let loss = -p.powf(gamma) * q.ln();
        let dz = -gamma * p.powf(gamma) * q * q.ln() + p.powf(gamma + 1.0);
        (loss, dz)
    }
}

/// Mean focal loss over a labeled edge batch.
pub fn focal_loss(preds: &[f64], labels: &[bool], gamma: f64) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Degenerate("empty edge set".into()));
    }
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term(p, y, gamma).0)
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Gradient of the focal loss, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Array2<f64>>,
    pub w_edge: Array1<f64>,
    pub b_edge: f64,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for w in &self.layers {
            v.extend(w.iter().copied());
        }
        v.extend(self.w_edge.iter().copied());
        v.push(self.b_edge);
        v
    }
}

fn check_edges(edges: &EdgeLabelSet, n: usize) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::Degenerate("no training edges".into()));
    }
    if edges.edges.iter().any(|&(i, j)| i >= n || j >= n) {
        return Err(Error::Shape("edge endpoint out of range".into()));
    }
    Ok(())
}

/// Focal loss of `model` on `edges`.
pub fn loss(
    model: &GlcModel,
    a_hat: &NormalizedAdjacency,
    h0: &Array2<f64>,
    edges: &EdgeLabelSet,
    gamma: f64,
) -> Result<f64> {
    check_edges(edges, h0.nrows())?;
    let h = gcn_forward(model, a_hat, h0)?;
    let preds: Vec<f64> = edges
        .edges
        .iter()
        .map(|&(i, j)| edge_confidence(model, &h, i, j))
        .collect();
    focal_loss(&preds, &edges.labels, gamma)
}

/// Disjoint mutable rows `i != j` of a row-major buffer with `d` columns.
fn two_rows_mut(buf: &mut [f64], i: usize, j: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = (i.min(j), i.max(j));
    let (head, tail) = buf.split_at_mut(hi * d);
    let (a, b) = (&mut head[lo * d..(lo + 1) * d], &mut tail[..d]);
    if i < j {
        (a, b)
    } else {
        (b, a)
    }
}

/// Focal loss and its analytic gradient.
pub fn loss_and_grad(
    model: &GlcModel,
    a_hat: &NormalizedAdjacency,
    h0: &Array2<f64>,
    edges: &EdgeLabelSet,
    gamma: f64,
) -> Result<(f64, Gradients)> {
    check_edges(edges, h0.nrows())?;
    let fwd = forward(model, a_hat, h0)?;
    let h = &fwd.out;
    let d = model.d_h();
    let w = &model.w_edge;
    let scale = 1.0 / edges.len() as f64;

    let hs = h.as_standard_layout();
    let hs = hs.as_slice().expect("standard layout");
    let (w_abs, w_mul) = w.as_slice().expect("contiguous").split_at(d);
    let mut total = 0.0;
    let mut dh = vec![0.0; hs.len()];
    let mut dw = vec![0.0; 2 * d];
    let mut db = 0.0;
    for (&(i, j), &y) in edges.edges.iter().zip(&edges.labels) {
        let (hi, hj) = (&hs[i * d..(i + 1) * d], &hs[j * d..(j + 1) * d]);
        let p = sigmoid(edge_logit_rows(w, model.b_edge, hi, hj));
        let (l, dz) = focal_term(p, y, gamma);
        total += l;
        let dz = dz * scale;
        db += dz;
        let (dw_abs, dw_mul) = dw.split_at_mut(d);
        let (di, dj) = two_rows_mut(&mut dh, i, j, d);
        for c in 0..d {
            let (a, b) = (hi[c], hj[c]);
            let diff = a - b;
            dw_abs[c] += dz * diff.abs();
            dw_mul[c] += dz * a * b;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let g_abs = dz * w_abs[c] * sign;
            let g_mul = dz * w_mul[c];
            di[c] += g_abs + g_mul * b;
            dj[c] += -g_abs + g_mul * a;
        }
    }
    let dh = Array2::from_shape_vec(h.raw_dim(), dh).expect("shape");
    let dw = Array1::from(dw);

    let mut layer_grads = vec![Array2::zeros((0, 0)); model.layers.len()];
    let mut upstream = dh;
    for l in (0..model.layers.len()).rev() {
        let mut dz = upstream;
        dz.zip_mut_with(&fwd.pre[l], |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        layer_grads[l] = fwd.concat[l].t().dot(&dz);
        if l > 0 {
            let dcat = dz.dot(&model.layers[l].t());
            let din = dcat.ncols() / 2;
            let self_part = dcat.slice(s![.., ..din]).to_owned();
            let agg_part = dcat.slice(s![.., din..]).to_owned();
            upstream = self_part + a_hat.apply_transpose(&agg_part);
        } else {
            upstream = Array2::zeros((0, 0));
        }
    }
    Ok((
        total * scale,
        Gradients {
            layers: layer_grads,
            w_edge: dw,
            b_edge: db,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The fixed early-stop iteration budget was exhausted.
    Budget,
}

/// Loss curve of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Loss before each update; one entry per iteration run.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter:
/// `v = momentum * v + g + wd * p`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut GlcModel, grads: &Gradients) {
        let mut params = model.to_flat();
        let g = grads.to_flat();
        assert_eq!(params.len(), g.len(), "gradient does not match model");
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), gi) in params.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = self.momentum * *v + gi + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
        model.set_flat(&params);
    }
}

/// Trains a freshly initialized model for `cfg.t_e` full-batch iterations.
pub fn train_glc(
    g: &KnnGraph,
    set: &EmbeddingSet,
    lab: &Labeling,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(GlcModel, TrainReport)> {
    let (mut models, report) = train_glc_checkpoints(g, set, lab, cfg, seed, &[cfg.t_e])?;
    Ok((models.pop().expect("one checkpoint"), report))
}

/// Like [`train_glc`] but runs to the largest of `checkpoints` and returns a
/// copy of the model after each listed iteration count (in the given order).
pub fn train_glc_checkpoints(
    g: &KnnGraph,
    set: &EmbeddingSet,
    lab: &Labeling,
    cfg: &RunConfig,
    seed: u64,
    checkpoints: &[usize],
) -> Result<(Vec<GlcModel>, TrainReport)> {
    if set.n() != g.n() {
        return Err(Error::Shape(format!(
            "{} samples for a {}-node graph",
            set.n(),
            g.n()
        )));
    }
    let edges = make_edge_labels(g, lab)?;
    if edges.is_empty() {
        return Err(Error::Degenerate("no training edges".into()));
    }
    let a_hat = normalized_adjacency(g);
    let h0 = &gcn_input(set.features());
    let mut model = GlcModel::init(set.d(), set.d(), cfg.gcn_layers, seed)?;
    let budget = checkpoints.iter().copied().max().unwrap_or(0);
    let mut saved: Vec<Option<GlcModel>> = vec![None; checkpoints.len()];
    let mut losses = Vec::with_capacity(budget);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    for it in 0..=budget {
        for (slot, &c) in saved.iter_mut().zip(checkpoints) {
            if c == it {
                *slot = Some(model.clone());
            }
        }
        if it == budget {
            break;
        }
        let (l, grads) = loss_and_grad(&model, &a_hat, h0, &edges, cfg.gamma)?;
        losses.push(l);
        opt.step(&mut model, &grads);
    }
    if !model.all_finite() {
        return Err(Error::Degenerate("training diverged to non-finite weights".into()));
    }
    let final_loss = loss(&model, &a_hat, h0, &edges, cfg.gamma)?;
    let report = TrainReport {
        iterations: losses.len(),
        losses,
        final_loss,
        stop_reason: StopReason::Budget,
    };
    Ok((saved.into_iter().map(|m| m.expect("checkpoint reached")).collect(), report))
}

/// Largest node count accepted by [`grad_check`].
pub const GRAD_CHECK_MAX_NODES: usize = 30;

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Max relative error between the analytic gradient and central finite
/// differences over every parameter. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    model: &GlcModel,
    g: &KnnGraph,
    h0: &Array2<f64>,
    lab: &Labeling,
    gamma: f64,
) -> Result<f64> {
    if g.n() > GRAD_CHECK_MAX_NODES {
        return Err(Error::invalid(
            "graph",
            format!("{} nodes, grad_check takes at most {GRAD_CHECK_MAX_NODES}", g.n()),
        ));
    }
    let a_hat = normalized_adjacency(g);
    let edges = make_edge_labels(g, lab)?;
    let (_, grads) = loss_and_grad(model, &a_hat, h0, &edges, gamma)?;
    let analytic = grads.to_flat();
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut v = base.clone();
        v[k] = base[k] + FD_STEP;
        probe.set_flat(&v);
        let up = loss(&probe, &a_hat, h0, &edges, gamma)?;
        v[k] = base[k] - FD_STEP;
        probe.set_flat(&v);
        let down = loss(&probe, &a_hat, h0, &edges, gamma)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
