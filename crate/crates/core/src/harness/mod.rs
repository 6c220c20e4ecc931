//! Experiment orchestration: datasets, variant grids and JSON reports.

pub mod diagnostics;

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cotrain::{run_training, EpochMetrics, FinalSamples, RunSummary, TrainConfig, TrainingRun, Variant};
use crate::datagen::{
    corrupt_asymmetric, corrupt_symmetric, cyclic_pair_map, gen_blobs, load_csv, BlobSpec, Dataset, DatagenError,
};
use crate::noise_model::{self, FitConfig, NoiseModelError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] crate::cotrain::CotrainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Train and test sets drawn from the same blob clusters.
    Blobs { n_train: usize, n_test: usize, classes: usize, dim: usize, separation: f64, seed: u64 },
    /// Features are standardized with training-set statistics when `standardize` is set.
    Csv { train: PathBuf, test: PathBuf, standardize: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Sym,
    /// Class `k` flips to `(k + 1) % c`.
    Asym,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self { mode: NoiseMode::Sym, rate: 0.0, seed: 0 }
    }
}

/// A grid of `variants x seeds` cells sharing one data and training setup.
///
/// Replicate seed `s` draws the blobs with `data.seed + s`, corrupts labels with
/// `noise.seed + s` and trains with `train.seed = s`, so every variant of a
/// replicate sees the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Drop per-epoch histograms from the report to keep it small.
    #[serde(default)]
    pub omit_histograms: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(HarnessError::Invalid("need at least one seed and one variant".into()));
        }
        if let DataSpec::Csv { train, test, .. } = &self.data {
            for p in [train, test] {
                if !p.exists() {
                    return Err(HarnessError::Invalid(format!("{} does not exist", p.display())));
                }
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Builds the (noisy) training set and the clean test set for one replicate.
pub fn build_datasets(data: &DataSpec, noise: &NoiseSpec, replicate: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = match data {
        DataSpec::Blobs { n_train, n_test, classes, dim, separation, seed } => {
            let all = gen_blobs(&BlobSpec {
                n: n_train + n_test,
                classes: *classes,
                dim: *dim,
                separation: *separation,
                seed: seed.wrapping_add(replicate),
            })?;
            all.split_at(*n_train)
        }
        DataSpec::Csv { train, test, standardize } => {
            let mut tr = load_csv(train, false)?;
            let mut te = load_csv(test, false)?;
            if tr.dim() != te.dim() {
                return Err(HarnessError::Invalid("train and test CSVs have different widths".into()));
            }
            if *standardize {
                standardize_pair(&mut tr, &mut te);
            }
            let classes = tr.class_count.max(te.class_count);
            tr.class_count = classes;
            te.class_count = classes;
            (tr, te)
        }
    };
    let seed = noise.seed.wrapping_add(replicate);
    let train = match noise.mode {
        _ if noise.rate == 0.0 => train,
        NoiseMode::Sym => corrupt_symmetric(&train, noise.rate, seed)?,
        NoiseMode::Asym => corrupt_asymmetric(&train, noise.rate, &cyclic_pair_map(train.class_count), seed)?,
    };
    Ok((train, test))
}

fn standardize_pair(train: &mut Dataset, test: &mut Dataset) {
    let n = train.len() as f64;
    for k in 0..train.dim() {
        let col = train.features.column(k);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for ds in [&mut *train, &mut *test] {
            ds.features.index_axis_mut(Axis(1), k).mapv_inplace(|v| (v - mean) / sd);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok { summary: RunSummary, epochs: Vec<EpochMetrics> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub window: usize,
    pub replicates: usize,
    pub failed: usize,
    /// Per-replicate mean net-1 test accuracy over the last `window` epochs.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_weight_auc_net1: Option<f64>,
    pub mean_weight_auc_net2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub spec: ExperimentSpec,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<Aggregate>,
}

impl Report {
    pub fn aggregate(&self, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
    }
}

/// Runs one `(variant, seed)` cell.
pub fn run_cell(spec: &ExperimentSpec, variant: Variant, seed: u64) -> Result<(TrainingRun, Dataset)> {
    let (train, test) = build_datasets(&spec.data, &spec.noise, seed)?;
    let cfg = TrainConfig { variant, seed, ..spec.train.clone() };
    let run = run_training(&train, &test, &cfg)?;
    Ok((run, train))
}

fn strip_histograms(epochs: &mut [EpochMetrics]) {
    for m in epochs {
        for d in std::iter::once(&mut m.net1).chain(m.net2.as_mut()) {
            for h in [&mut d.similarity_histogram, &mut d.loss_histogram] {
                h.all.counts.clear();
                h.clean = None;
                h.noisy = None;
            }
        }
    }
}

/// Executes every cell (in parallel), isolating failures, and aggregates.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let cells = execute_cells(spec, |variant, seed| run_cell(spec, variant, seed).map(|(run, _)| run));
    let aggregates = aggregate_cells(&spec.variants, &cells, spec.train.report_window);
    Ok(Report { version: VERSION.to_string(), spec: spec.clone(), cells, aggregates })
}

fn execute_cells<F>(spec: &ExperimentSpec, runner: F) -> Vec<CellReport>
where
    F: Fn(Variant, u64) -> Result<TrainingRun> + Sync,
{
    let jobs: Vec<(Variant, u64)> =
        spec.variants.iter().flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s))).collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let outcome = match catch_unwind(AssertUnwindSafe(|| runner(variant, seed))) {
                Ok(Ok(run)) => ok_outcome(spec, run.summary, run.epochs),
                Ok(Err(e)) => CellOutcome::Failed { error: e.to_string() },
                Err(_) => CellOutcome::Failed { error: "cell panicked".into() },
            };
            CellReport { variant, seed, outcome }
        })
        .collect()
}

fn ok_outcome(spec: &ExperimentSpec, summary: RunSummary, mut epochs: Vec<EpochMetrics>) -> CellOutcome {
    if spec.omit_histograms {
        strip_histograms(&mut epochs);
    }
    CellOutcome::Ok { summary, epochs }
}

/// Result of [`run_single`]: the report plus the per-sample state it summarizes.
#[derive(Debug)]
pub struct SingleRun {
    pub report: Report,
    /// Full per-epoch series, histograms included even when the report omits them.
    pub epochs: Vec<EpochMetrics>,
    pub final_samples: FinalSamples,
    pub train: Dataset,
}

/// Runs a one-cell spec without failure isolation, keeping the final weights.
pub fn run_single(spec: &ExperimentSpec) -> Result<SingleRun> {
    spec.validate()?;
    let (&[variant], &[seed]) = (spec.variants.as_slice(), spec.seeds.as_slice()) else {
        return Err(HarnessError::Invalid("a single run takes exactly one variant and one seed".into()));
    };
    let (run, train) = run_cell(spec, variant, seed)?;
    let cells = vec![CellReport { variant, seed, outcome: ok_outcome(spec, run.summary, run.epochs.clone()) }];
    let aggregates = aggregate_cells(&spec.variants, &cells, spec.train.report_window);
    let report = Report { version: VERSION.to_string(), spec: spec.clone(), cells, aggregates };
    Ok(SingleRun { report, epochs: run.epochs, final_samples: run.final_samples, train })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Recomputes aggregates from the stored per-epoch series.
pub fn aggregate_cells(variants: &[Variant], cells: &[CellReport], window: usize) -> Vec<Aggregate> {
    variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&CellReport> = cells.iter().filter(|c| c.variant == variant).collect();
            let ok: Vec<&Vec<EpochMetrics>> = mine
                .iter()
                .filter_map(|c| match &c.outcome {
                    CellOutcome::Ok { epochs, .. } => Some(epochs),
                    CellOutcome::Failed { .. } => None,
                })
                .collect();
            let accuracies: Vec<f64> = ok
                .iter()
                .map(|epochs| {
                    let accs: Vec<f64> = epochs.iter().map(|m| m.test_accuracy_net1).collect();
                    crate::cotrain::last_window_mean(&accs, window)
                })
                .collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
            Aggregate {
                variant,
                window,
                replicates: ok.len(),
                failed: mine.len() - ok.len(),
                accuracies,
                mean_accuracy,
                std_accuracy,
                mean_weight_auc_net1: mean_opt(ok.iter().map(|e| e.last().and_then(|m| m.net1.weight_auc))),
                mean_weight_auc_net2: mean_opt(
                    ok.iter().map(|e| e.last().and_then(|m| m.net2.as_ref().and_then(|d| d.weight_auc))),
                ),
            }
        })
        .collect()
}

/// Re-aggregates an existing report with a different accuracy window.
pub fn reaggregate(report: &Report, window: usize) -> Report {
    let mut out = report.clone();
    out.aggregates = aggregate_cells(&report.spec.variants, &report.cells, window);
    out
}

/// Combines reports that share data, noise and training settings into one.
///
/// Variants and seeds are unioned in first-seen order; a `(variant, seed)`
/// cell may appear only once across the inputs.
pub fn merge_reports(reports: Vec<Report>) -> Result<Report> {
    let mut iter = reports.into_iter();
    let mut merged = iter.next().ok_or_else(|| HarnessError::Invalid("no reports to merge".into()))?;
    let comparable = |spec: &ExperimentSpec| {
        let train = TrainConfig { variant: Variant::Standard, seed: 0, ..spec.train.clone() };
        (spec.data.clone(), spec.noise, train)
    };
    let key = comparable(&merged.spec);
    for (i, other) in iter.enumerate() {
        if comparable(&other.spec) != key {
            return Err(HarnessError::Invalid(format!("report {} was produced with different settings", i + 2)));
        }
        for cell in other.cells {
            if merged.cells.iter().any(|c| c.variant == cell.variant && c.seed == cell.seed) {
                return Err(HarnessError::Invalid(format!(
                    "cell ({}, seed {}) appears in more than one report",
                    cell.variant, cell.seed
                )));
            }
            if !merged.spec.variants.contains(&cell.variant) {
                merged.spec.variants.push(cell.variant);
            }
            if !merged.spec.seeds.contains(&cell.seed) {
                merged.spec.seeds.push(cell.seed);
            }
            merged.cells.push(cell);
        }
        merged.spec.omit_histograms |= other.spec.omit_histograms;
    }
    merged.aggregates = aggregate_cells(&merged.spec.variants, &merged.cells, merged.spec.train.report_window);
    Ok(merged)
}

/// Plain-text table of a report's aggregates.
pub fn format_aggregates(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>5} {:>10} {:>8} {:>8} {:>8}", "variant", "runs", "acc(mean)", "std", "auc1", "auc2");
    for a in &report.aggregates {
        let auc = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>10.4} {:>8.4} {:>8} {:>8}",
            a.variant.name(),
            a.replicates,
            a.mean_accuracy,
            a.std_accuracy,
            auc(a.mean_weight_auc_net1),
            auc(a.mean_weight_auc_net2)
        );
    }
    out
}

/// Parses a single column of numbers. A non-numeric first line is taken as a header.
pub fn parse_value_column(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ if i == 0 => continue,
            _ => return Err(HarnessError::Invalid(format!("row {}: non-numeric value {cell:?}", i + 1))),
        }
    }
    Ok(values)
}

/// Fits the noise model to a column of similarities and renders the result.
pub fn fit_noise_report(values: &[f64], cfg: &FitConfig) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "samples: {}", values.len());
    let fit = match noise_model::fit_bmm(values, cfg) {
        Ok(fit) => fit,
        Err(NoiseModelError::Degenerate(reason)) => {
            let _ = writeln!(out, "fit: DegenerateFit ({reason})");
            let _ = writeln!(out, "weights: all 1 (fallback)");
            return Ok(out);
        }
        Err(e) => return Err(HarnessError::Invalid(e.to_string())),
    };
    let m = &fit.mixture;
    let _ = writeln!(out, "fit: ok");
    let _ = writeln!(out, "iterations: {} ({})", fit.iterations, if fit.converged { "converged" } else { "max_iters" });
    let _ = writeln!(out, "log_likelihood: {:.6}", fit.log_likelihood_trace.last().unwrap());
    let _ = writeln!(out, "clean_index: {}", m.clean_index);
    for (k, c) in m.components.iter().enumerate() {
        let _ = writeln!(
            out,
            "component {k}: delta={:.6} alpha={:.6} beta={:.6} mean={:.6}",
            m.mixing[k],
            c.alpha,
            c.beta,
            c.mean()
        );
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let _ = writeln!(out, "deciles:");
    for d in 1..=9 {
        let idx = ((d as f64 / 10.0) * (sorted.len() - 1) as f64).round() as usize;
        let s = sorted[idx];
        let w = noise_model::posterior_clean(m, noise_model::clamp(s, cfg.clamp_eps))
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let _ = writeln!(out, "  q{:<2} s={s:.6} w={w:.6}", d * 10);
    }
    Ok(out)
}
