//! Domain types, synthetic data with per-camera shift, and CSV IO.
//!
//! Embeddings CSV: `id,camera,gt_label,f_0..f_{d-1}[,s_0..s_{c-1}]`, with
//! `gt_label = -1` when identities are unknown. Labels CSV: `id,label`, with
//! `-1` for outliers. Floats are written with 17 significant digits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Label value marking a sample the clustering left unassigned.
pub const OUTLIER: i64 = -1;

const NORM_TOL: f64 = 1e-6;
const LOAD_NORM_TOL: f64 = 1e-3;

/// Norm of every identity centroid in raw input space.
pub const CENTROID_NORM: f64 = 3.0;

/// N samples with unit-length features, optional class-probability scores,
/// camera ids and optional ground-truth identities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f64>,
    scores: Option<Array2<f64>>,
    cameras: Vec<usize>,
    gt_labels: Option<Vec<i64>>,
}

impl EmbeddingSet {
    pub fn new(
        features: Array2<f64>,
        scores: Option<Array2<f64>>,
        cameras: Vec<usize>,
        gt_labels: Option<Vec<i64>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if cameras.len() != n {
            return Err(Error::Shape(format!(
                "{} cameras for {} feature rows",
                cameras.len(),
                n
            )));
        }
        if let Some(gt) = &gt_labels {
            if gt.len() != n {
                return Err(Error::Shape(format!(
                    "{} ground-truth labels for {} feature rows",
                    gt.len(),
                    n
                )));
            }
            if let Some(i) = gt.iter().position(|&g| g < 0) {
                return Err(Error::invalid(
                    "gt_labels",
                    format!("negative identity at row {i}"),
                ));
            }
        }
        for (i, row) in features.outer_iter().enumerate() {
            let norm = l2(row);
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::invalid(
                    "features",
                    format!("row {i} has norm {norm}, expected 1"),
                ));
            }
        }
        if let Some(s) = &scores {
            if s.nrows() != n {
                return Err(Error::Shape(format!(
                    "{} score rows for {} feature rows",
                    s.nrows(),
                    n
                )));
            }
            for (i, row) in s.outer_iter().enumerate() {
                if row.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::invalid(
                        "scores",
                        format!("row {i} has a negative or NaN entry"),
                    ));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > NORM_TOL {
                    return Err(Error::invalid(
                        "scores",
                        format!("row {i} sums to {sum}, expected 1"),
                    ));
                }
            }
        }
        Ok(Self {
            features,
            scores,
            cameras,
            gt_labels,
        })
    }

    /// Builds a set from arbitrary non-zero rows, L2-normalizing each.
    pub fn from_raw_features(
        mut features: Array2<f64>,
        scores: Option<Array2<f64>>,
        cameras: Vec<usize>,
        gt_labels: Option<Vec<i64>>,
    ) -> Result<Self> {
        normalize_rows(&mut features)?;
        Self::new(features, scores, cameras, gt_labels)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn scores(&self) -> Option<&Array2<f64>> {
        self.scores.as_ref()
    }

    pub fn cameras(&self) -> &[usize] {
        &self.cameras
    }

    pub fn gt_labels(&self) -> Option<&[i64]> {
        self.gt_labels.as_deref()
    }

    /// Same samples with the score matrix dropped.
    pub fn without_scores(&self) -> Self {
        Self {
            scores: None,
            ..self.clone()
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), idx),
            scores: self.scores.as_ref().map(|s| s.select(Axis(0), idx)),
            cameras: idx.iter().map(|&i| self.cameras[i]).collect(),
            gt_labels: self
                .gt_labels
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }
}

pub(crate) fn l2(row: ArrayView1<f64>) -> f64 {
    row.dot(&row).sqrt()
}

pub(crate) fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        let norm = l2(row.view());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {i} cannot be normalized (norm {norm})"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Per-sample pseudo labels; `-1` marks outliers, cluster ids are dense.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Labeling {
    labels: Vec<i64>,
    n_clusters: usize,
}

impl Labeling {
    /// Validates and compacts labels. Ids that already cover `0..m` densely are
    /// kept; otherwise they are renumbered in order of first appearance. Any
    /// value below `-1` is rejected.
    pub fn new(raw: Vec<i64>) -> Result<Self> {
        if let Some(i) = raw.iter().position(|&v| v < OUTLIER) {
            return Err(Error::invalid(
                "labels",
                format!("label {} at index {i}", raw[i]),
            ));
        }
        let max = raw.iter().copied().max().unwrap_or(OUTLIER);
        if max >= 0 && (max as usize) < raw.len() {
            let mut seen = vec![false; max as usize + 1];
            for &v in &raw {
                if v >= 0 {
                    seen[v as usize] = true;
                }
            }
            if seen.iter().all(|&s| s) {
                return Ok(Self {
                    n_clusters: seen.len(),
                    labels: raw,
                });
            }
        }
        let mut remap: HashMap<i64, i64> = HashMap::new();
        let labels = raw
            .iter()
            .map(|&v| {
                if v == OUTLIER {
                    OUTLIER
                } else {
                    let next = remap.len() as i64;
                    *remap.entry(v).or_insert(next)
                }
            })
            .collect();
        Ok(Self {
            labels,
            n_clusters: remap.len(),
        })
    }

    pub fn all_outliers(n: usize) -> Self {
        Self {
            labels: vec![OUTLIER; n],
            n_clusters: 0,
        }
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn is_outlier(&self, i: usize) -> bool {
        self.labels[i] == OUTLIER
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l == OUTLIER).count()
    }

    /// Indices of every sample carrying a cluster label.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_outlier(i)).collect()
    }

    /// Sizes of clusters `0..n_clusters`.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    /// Labels with every outlier replaced by a fresh singleton id.
    pub fn with_singleton_outliers(&self) -> Vec<i64> {
        let mut next = self.n_clusters as i64;
        self.labels
            .iter()
            .map(|&l| {
                if l == OUTLIER {
                    next += 1;
                    next - 1
                } else {
                    l
                }
            })
            .collect()
    }
}

/// Parameters of the synthetic identity/camera generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub d_raw: usize,
    pub n_cameras: usize,
    pub camera_shift: f64,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 30,
            samples_per_identity: 20,
            d_raw: 64,
            n_cameras: 4,
            camera_shift: 2.0,
            cluster_spread: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 1 {
            return Err(Error::invalid("n_identities", "must be >= 1"));
        }
        if self.samples_per_identity < 1 {
            return Err(Error::invalid("samples_per_identity", "must be >= 1"));
        }
        if self.d_raw < 1 {
            return Err(Error::invalid("d_raw", "must be >= 1"));
        }
        if self.n_cameras < 1 {
            return Err(Error::invalid("n_cameras", "must be >= 1"));
        }
        if !(self.camera_shift >= 0.0) || !self.camera_shift.is_finite() {
            return Err(Error::invalid("camera_shift", "must be finite and >= 0"));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::invalid("cluster_spread", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Raw (not yet embedded) synthetic inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub inputs: Array2<f64>,
    pub cameras: Vec<usize>,
    pub gt_labels: Vec<i64>,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }
}

fn gaussian_direction(rng: &mut impl Rng, d: usize, norm: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

/// Samples `n_identities * samples_per_identity` raw points, identity-major.
///
/// Each identity has a centroid of norm [`CENTROID_NORM`]; each camera has one
/// additive offset of norm `camera_shift`. A sample is its centroid plus its
/// camera offset plus isotropic Gaussian noise of std `cluster_spread`. Cameras
/// cycle within an identity from a random starting camera, so every identity is
/// spread evenly over the cameras.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let d = spec.d_raw;
    let centroids: Vec<Vec<f64>> = (0..spec.n_identities)
        .map(|_| gaussian_direction(&mut rng, d, CENTROID_NORM))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..spec.n_cameras)
        .map(|_| gaussian_direction(&mut rng, d, spec.camera_shift))
        .collect();

    let n = spec.n_identities * spec.samples_per_identity;
    let mut inputs = Array2::zeros((n, d));
    let mut cameras = Vec::with_capacity(n);
    let mut gt_labels = Vec::with_capacity(n);
    let mut row = 0;
    for (id, centroid) in centroids.iter().enumerate() {
        let start = rng.random_range(0..spec.n_cameras);
        for j in 0..spec.samples_per_identity {
            let cam = (start + j) % spec.n_cameras;
            for c in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs[[row, c]] = centroid[c] + offsets[cam][c] + spec.cluster_spread * noise;
            }
            cameras.push(cam);
            gt_labels.push(id as i64);
            row += 1;
        }
    }
    Ok(RawDataset {
        inputs,
        cameras,
        gt_labels,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `set` in the embeddings CSV format.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = String::from("id,camera,gt_label");
    for c in 0..set.d() {
        header.push_str(&format!(",f_{c}"));
    }
    if let Some(s) = set.scores() {
        for c in 0..s.ncols() {
            header.push_str(&format!(",s_{c}"));
        }
    }
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..set.n() {
        let gt = set.gt_labels().map_or(OUTLIER, |g| g[i]);
        let mut line = format!("{i},{},{gt}", set.cameras()[i]);
        for &v in set.features().row(i) {
            line.push(',');
            line.push_str(&fmt_f64(v));
        }
        if let Some(s) = set.scores() {
            for &v in s.row(i) {
                line.push(',');
                line.push_str(&fmt_f64(v));
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {name} `{s}`")))
}

fn check_id(path: &Path, line: u64, s: &str, expected: usize) -> Result<()> {
    let id: usize = parse_field(path, line, "id", s)?;
    if id != expected {
        return Err(parse_err(
            path,
            line,
            format!("id {id} out of sequence, expected {expected}"),
        ));
    }
    Ok(())
}

/// Reads an embeddings CSV. Feature rows within 1e-3 of unit length are
/// re-normalized; anything further off is rejected.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "camera" || cols[2] != "gt_label" {
        return Err(parse_err(
            path,
            1,
            "header must start with id,camera,gt_label,f_0",
        ));
    }
    let mut d = 0;
    while 3 + d < cols.len() && cols[3 + d] == format!("f_{d}") {
        d += 1;
    }
    let mut c = 0;
    while 3 + d + c < cols.len() && cols[3 + d + c] == format!("s_{c}") {
        c += 1;
    }
    if d == 0 || 3 + d + c != cols.len() {
        return Err(parse_err(
            path,
            1,
            "header columns must be f_0..f_{d-1} followed by optional s_0..s_{c-1}",
        ));
    }
    let width = cols.len();

    let mut feats = Vec::new();
    let mut scores = Vec::new();
    let mut cameras = Vec::new();
    let mut gts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} columns, found {}", rec.len()),
            ));
        }
        check_id(path, line, &rec[0], cameras.len())?;
        cameras.push(parse_field::<usize>(path, line, "camera", &rec[1])?);
        gts.push(parse_field::<i64>(path, line, "gt_label", &rec[2])?);
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            row.push(parse_field::<f64>(path, line, "feature", &rec[3 + j])?);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= LOAD_NORM_TOL) {
            return Err(parse_err(
                path,
                line,
                format!("feature norm {norm} deviates from 1 by more than {LOAD_NORM_TOL}"),
            ));
        }
        feats.extend(row.into_iter().map(|v| v / norm));
        for j in 0..c {
            scores.push(parse_field::<f64>(path, line, "score", &rec[3 + d + j])?);
        }
    }
    let n = cameras.len();
    let features = Array2::from_shape_vec((n, d), feats).expect("row-major features");
    let scores = (c > 0).then(|| Array2::from_shape_vec((n, c), scores).expect("row-major scores"));
    let gt_labels = if gts.iter().all(|&g| g == OUTLIER) {
        None
    } else if let Some(i) = gts.iter().position(|&g| g < 0) {
        return Err(parse_err(
            path,
            i as u64 + 2,
            "gt_label must be -1 on every row or on none",
        ));
    } else {
        Some(gts)
    };
    EmbeddingSet::new(features, scores, cameras, gt_labels).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Writes `lab` as `id,label` rows.
pub fn save_labels(lab: &Labeling, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "id,label").map_err(io)?;
    for (i, l) in lab.labels().iter().enumerate() {
        writeln!(w, "{i},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an `id,label` CSV into a compacted [`Labeling`].
pub fn load_labels(path: impl AsRef<Path>) -> Result<Labeling> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(parse_err(path, 1, "header must be `id,label`"));
    }
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 columns, found {}", rec.len()),
            ));
        }
        check_id(path, line, &rec[0], labels.len())?;
        let l: i64 = parse_field(path, line, "label", &rec[1])?;
        if l < OUTLIER {
            return Err(parse_err(path, line, format!("label {l} below -1")));
        }
        labels.push(l);
    }
    Labeling::new(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_distances(raw: &RawDataset) -> (f64, f64) {
        let (mut cross, mut nc, mut within, mut nw) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..raw.n() {
            for j in (i + 1)..raw.n() {
                if raw.gt_labels[i] != raw.gt_labels[j] {
                    continue;
                }
                let diff = &raw.inputs.row(i) - &raw.inputs.row(j);
                let dist = diff.dot(&diff).sqrt();
                if raw.cameras[i] == raw.cameras[j] {
                    within += dist;
                    nw += 1;
                } else {
                    cross += dist;
                    nc += 1;
                }
            }
        }
        (cross / nc as f64, within / nw as f64)
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            seed: 7,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n(), 600);
    }

    #[test]
    fn no_camera_shift_means_no_camera_effect() {
        let spec = SynthSpec {
            camera_shift: 0.0,
            seed: 3,
            ..SynthSpec::default()
        };
        let (cross, within) = mean_distances(&generate_synthetic(&spec).unwrap());
        assert!((cross - within).abs() / within < 0.02, "{cross} vs {within}");
    }

    #[test]
    fn camera_shift_separates_cameras_within_identity() {
        let spec = SynthSpec {
            n_identities: 30,
            samples_per_identity: 20,
            n_cameras: 4,
            camera_shift: 2.0,
            seed: 11,
            ..SynthSpec::default()
        };
        let (cross, within) = mean_distances(&generate_synthetic(&spec).unwrap());
        assert!(cross > within, "{cross} vs {within}");
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = SynthSpec {
            cluster_spread: 0.0,
            ..SynthSpec::default()
        };
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidParam {
                field: "cluster_spread",
                ..
            }
        ));
    }

    #[test]
    fn identities_are_balanced() {
        let raw = generate_synthetic(&SynthSpec::default()).unwrap();
        let mut counts = [0; 30];
        for &g in &raw.gt_labels {
            counts[g as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn labeling_compacts_in_first_appearance_order() {
        let lab = Labeling::new(vec![7, -1, 3, 7, 9, -1]).unwrap();
        assert_eq!(lab.labels(), &[0, -1, 1, 0, 2, -1]);
        assert_eq!(lab.n_clusters(), 3);
        assert_eq!(lab.n_outliers(), 2);
        assert!(Labeling::new(vec![0, -2]).is_err());
        // already dense ids are kept as they are
        let dense = Labeling::new(vec![2, 0, -1, 1, 2]).unwrap();
        assert_eq!(dense.labels(), &[2, 0, -1, 1, 2]);
        assert_eq!(dense.n_clusters(), 3);
        assert_eq!(Labeling::new(vec![-1, -1]).unwrap().n_clusters(), 0);
    }

    #[test]
    fn singleton_expansion() {
        let lab = Labeling::new(vec![0, -1, 0, -1]).unwrap();
        assert_eq!(lab.with_singleton_outliers(), vec![0, 1, 0, 2]);
    }

    #[test]
    fn rejects_non_unit_features() {
        let f = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        assert!(EmbeddingSet::new(f, None, vec![0], None).is_err());
    }

    #[test]
    fn rejects_bad_scores() {
        let f = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let s = Array2::from_shape_vec((1, 2), vec![0.7, 0.7]).unwrap();
        assert!(EmbeddingSet::new(f.clone(), Some(s), vec![0], None).is_err());
        let s = Array2::from_shape_vec((1, 2), vec![1.5, -0.5]).unwrap();
        assert!(EmbeddingSet::new(f, Some(s), vec![0], None).is_err());
    }
}
