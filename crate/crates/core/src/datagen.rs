//! Synthetic datasets, label corruption and CSV ingestion.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

/// Features with observed (possibly noisy) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub corruption_mask: Option<Vec<bool>>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self { features, labels, true_labels: None, corruption_mask: None, class_count };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Checks label ranges, mask consistency and feature finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.nrows() != n {
            return Err(DatagenError::InvalidArgument(format!(
                "{} feature rows for {n} labels",
                self.features.nrows()
            )));
        }
        if self.class_count == 0 {
            return Err(DatagenError::InvalidArgument("class_count must be positive".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(DatagenError::InvalidArgument(format!("label {y} >= class count {}", self.class_count)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(DatagenError::InvalidArgument("non-finite feature".into()));
        }
        if let Some(t) = &self.true_labels {
            if t.len() != n || t.iter().any(|&y| y >= self.class_count) {
                return Err(DatagenError::InvalidArgument("true_labels misaligned or out of range".into()));
            }
            if let Some(mask) = &self.corruption_mask {
                let consistent =
                    mask.len() == n && mask.iter().zip(t.iter().zip(&self.labels)).all(|(&m, (a, b))| m == (a != b));
                if !consistent {
                    return Err(DatagenError::InvalidArgument("corruption mask disagrees with labels".into()));
                }
            }
        }
        Ok(())
    }

    pub fn noisy_count(&self) -> usize {
        self.corruption_mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Per-class counts of the observed labels.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Splits into the first `n_first` samples and the rest.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let n_first = n_first.min(self.len());
        let take = |range: std::ops::Range<usize>| Dataset {
            features: self.features.slice(ndarray::s![range.clone(), ..]).to_owned(),
            labels: self.labels[range.clone()].to_vec(),
            true_labels: self.true_labels.as_ref().map(|t| t[range.clone()].to_vec()),
            corruption_mask: self.corruption_mask.as_ref().map(|m| m[range.clone()].to_vec()),
            class_count: self.class_count,
        };
        (take(0..n_first), take(n_first..self.len()))
    }

    /// Ground-truth labels, falling back to the observed ones.
    pub fn clean_labels(&self) -> &[usize] {
        self.true_labels.as_deref().unwrap_or(&self.labels)
    }

    fn with_corruption(&self, labels: Vec<usize>) -> Dataset {
        let truth = self.clean_labels().to_vec();
        let mask = labels.iter().zip(&truth).map(|(a, b)| a != b).collect();
        Dataset {
            features: self.features.clone(),
            labels,
            true_labels: Some(truth),
            corruption_mask: Some(mask),
            class_count: self.class_count,
        }
    }
}

/// Standardizes every column to zero mean and unit variance in place.
/// Constant columns are only centered.
pub fn standardize(features: &mut Array2<f64>) {
    let n = features.nrows() as f64;
    if n == 0.0 {
        return;
    }
    for mut col in features.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
    }
}

/// Arguments for [`gen_blobs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

fn class_centers(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let gaussian = |rng: &mut ChaCha8Rng| Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    if classes <= dim {
        // orthonormal frame, centres at sep/sqrt(2) along each axis: pairwise distance == sep
        let mut frame: Vec<Array1<f64>> = Vec::with_capacity(classes);
        while frame.len() < classes {
            let mut v: Array1<f64> = gaussian(rng);
            for q in &frame {
                let proj = v.dot(q);
                v.scaled_add(-proj, q);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                frame.push(v / norm);
            }
        }
        let radius = separation / std::f64::consts::SQRT_2;
        frame.into_iter().map(|q| q * radius).collect()
    } else {
        let centers: Vec<Array1<f64>> = (0..classes).map(|_| gaussian(rng)).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..classes {
            for j in i + 1..classes {
                let d = &centers[i] - &centers[j];
                min_dist = min_dist.min(d.dot(&d).sqrt());
            }
        }
        let scale = separation / min_dist.max(1e-12);
        centers.into_iter().map(|c| c * scale).collect()
    }
}

/// `classes` unit-covariance Gaussian clusters whose centres are at least
/// `separation` apart. Sample `i` has label `i % classes`. Features are
/// standardized after sampling.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec { n, classes, dim, separation, seed } = *spec;
    if classes < 1 || n < classes || dim < 2 || separation <= 0.0 || !separation.is_finite() {
        return Err(DatagenError::InvalidArgument(format!(
            "need n >= classes >= 1, dim >= 2, separation > 0 (got {spec:?})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = class_centers(classes, dim, separation, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Array2::zeros((n, dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let center = &centers[labels[i]];
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = center[k] + z;
        }
    }
    standardize(&mut features);
    Dataset::new(features, labels, classes)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(DatagenError::InvalidArgument(format!("noise rate {rate} outside [0, 1)")))
    }
}

/// Relabels exactly `round(rate * n)` samples, chosen without replacement,
/// to a class drawn uniformly from the other `c - 1` classes.
pub fn corrupt_symmetric(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let n = ds.len();
    let count = (rate * n as f64).round() as usize;
    if count > 0 && ds.class_count < 2 {
        return Err(DatagenError::InvalidArgument("symmetric noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    let truth = ds.clean_labels();
    let mut labels = truth.to_vec();
    for i in chosen {
        let draw = rng.random_range(0..ds.class_count - 1);
        labels[i] = if draw >= truth[i] { draw + 1 } else { draw };
    }
    Ok(ds.with_corruption(labels))
}

/// Flips `round(rate * class_size)` samples of every class `k` to `pair_map[k]`.
pub fn corrupt_asymmetric(ds: &Dataset, rate: f64, pair_map: &[usize], seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    if pair_map.len() != ds.class_count || pair_map.iter().any(|&t| t >= ds.class_count) {
        return Err(DatagenError::InvalidArgument(format!(
            "pair map {pair_map:?} does not cover {} classes",
            ds.class_count
        )));
    }
    let truth = ds.clean_labels();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in truth.iter().enumerate() {
        members[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = truth.to_vec();
    for (class, idx) in members.iter().enumerate() {
        let count = (rate * idx.len() as f64).round() as usize;
        if count == 0 {
            continue;
        }
        if pair_map[class] == class {
            return Err(DatagenError::InvalidArgument(format!("pair map fixes class {class}")));
        }
        let mut chosen = index::sample(&mut rng, idx.len(), count).into_vec();
        chosen.sort_unstable();
        for j in chosen {
            labels[idx[j]] = pair_map[class];
        }
    }
    Ok(ds.with_corruption(labels))
}

/// `k -> (k + 1) % c`.
pub fn cyclic_pair_map(classes: usize) -> Vec<usize> {
    (0..classes).map(|k| (k + 1) % classes).collect()
}

/// Writes `f0,...,f{d-1},label[,true_label]` with 17 significant digits.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(ds))?;
    Ok(())
}

pub fn to_csv_string(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    let mut header: Vec<String> = (0..d).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    if ds.true_labels.is_some() {
        header.push("true_label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in ds.features.rows().into_iter().enumerate() {
        for v in row.iter() {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = write!(out, "{}", ds.labels[i]);
        if let Some(t) = &ds.true_labels {
            let _ = write!(out, ",{}", t[i]);
        }
        out.push('\n');
    }
    out
}

/// Reads a dataset written by [`save_csv`] (or any file with the same header).
/// Row numbers in errors are 1-based lines, not counting blank ones.
pub fn load_csv(path: &Path, standardize_features: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, standardize_features)
}

pub fn parse_csv(text: &str, standardize_features: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let cols: Vec<String> = reader
        .headers()
        .map_err(|e| DatagenError::Csv { row: 1, message: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    if cols.is_empty() || cols.iter().all(String::is_empty) {
        return Err(DatagenError::Csv { row: 1, message: "empty file".into() });
    }
    let has_truth = cols.last().map(String::as_str) == Some("true_label");
    let n_label_cols = if has_truth { 2 } else { 1 };
    if cols.len() < n_label_cols + 1 || cols[cols.len() - n_label_cols] != "label" {
        return Err(DatagenError::Csv { row: 1, message: format!("malformed header {:?}", cols.join(",")) });
    }
    let d = cols.len() - n_label_cols;
    for (k, c) in cols[..d].iter().enumerate() {
        if *c != format!("f{k}") {
            return Err(DatagenError::Csv { row: 1, message: format!("expected column f{k}, found {c:?}") });
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatagenError::Csv {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != cols.len() {
            return Err(DatagenError::Csv {
                row,
                message: format!("expected {} cells, found {}", cols.len(), record.len()),
            });
        }
        for cell in record.iter().take(d) {
            let v: f64 = cell
                .parse()
                .map_err(|_| DatagenError::Csv { row, message: format!("non-numeric feature {cell:?}") })?;
            if !v.is_finite() {
                return Err(DatagenError::Csv { row, message: format!("non-finite feature {cell:?}") });
            }
            values.push(v);
        }
        let parse_label = |cell: &str| {
            cell.parse::<usize>()
                .map_err(|_| DatagenError::Csv { row, message: format!("invalid label {cell:?}") })
        };
        labels.push(parse_label(&record[d])?);
        if has_truth {
            truth.push(parse_label(&record[d + 1])?);
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(DatagenError::Csv { row: 2, message: "no data rows".into() });
    }
    // class count is inferred, so every parsed label is in range by construction
    let class_count = 1 + labels.iter().chain(&truth).copied().max().unwrap_or(0);
    let mut features = Array2::from_shape_vec((n, d), values).expect("row lengths checked");
    if standardize_features {
        standardize(&mut features);
    }
    let mut ds = Dataset::new(features, labels, class_count)?;
    if has_truth {
        ds.corruption_mask = Some(ds.labels.iter().zip(&truth).map(|(a, b)| a != b).collect());
        ds.true_labels = Some(truth);
    }
    ds.validate()?;
    Ok(ds)
}
