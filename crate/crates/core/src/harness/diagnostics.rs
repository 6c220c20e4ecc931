//! Weight-separation score, histograms and plot-ready CSV exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::cotrain::{EpochMetrics, FinalSamples, NetworkDiagnostics};
use crate::datagen::Dataset;

pub const DEFAULT_BINS: usize = 50;

/// Area under the ROC curve for "higher weight means clean".
///
/// Computed by the Mann-Whitney rank statistic with midranks, so tied
/// clean/noisy pairs count one half. `mask[i]` is true for corrupted samples.
pub fn weight_auc(weights: &[f64], mask: &[bool]) -> Result<f64, HarnessError> {
    if weights.len() != mask.len() {
        return Err(HarnessError::Invalid(format!("{} weights for {} mask entries", weights.len(), mask.len())));
    }
    let noisy = mask.iter().filter(|&&m| m).count();
    let clean = mask.len() - noisy;
    if noisy == 0 || clean == 0 {
        return Err(HarnessError::Invalid("mask must contain both clean and corrupted samples".into()));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
    let mut clean_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && weights[order[end]] == weights[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their average
        let midrank = (start + 1 + end) as f64 / 2.0;
        let clean_in_tie = order[start..end].iter().filter(|&&i| !mask[i]).count();
        clean_rank_sum += midrank * clean_in_tie as f64;
        start = end;
    }
    let c = clean as f64;
    let u = clean_rank_sum - c * (c + 1.0) / 2.0;
    Ok(u / (c * noisy as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped into the end bins.
    pub fn build<'a>(values: impl IntoIterator<Item = &'a f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let idx = ((v - lo) / width).floor();
            let idx = if idx.is_nan() { 0 } else { (idx.max(0.0) as usize).min(bins - 1) };
            counts[idx] += 1;
        }
        Self { lo, hi, counts }
    }

    /// A usable upper bin edge for data whose maximum is `max`.
    pub fn upper_edge(max: f64) -> f64 {
        if max > 0.0 && max.is_finite() {
            max
        } else {
            1.0
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the fullest bin (first on ties).
    pub fn mode_bin(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + width * i as f64, self.lo + width * (i + 1) as f64)
    }
}

/// Histogram over all samples, plus clean/noisy halves when a mask is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHistogram {
    pub all: Histogram,
    pub clean: Option<Histogram>,
    pub noisy: Option<Histogram>,
}

impl SplitHistogram {
    pub fn build(values: &[f64], mask: Option<&[bool]>, lo: f64, hi: f64, bins: usize) -> Self {
        let all = Histogram::build(values, lo, hi, bins);
        let (clean, noisy) = match mask {
            Some(mask) => {
                let pick = |want: bool| {
                    let vals = values.iter().zip(mask).filter(move |(_, &m)| m == want).map(|(v, _)| v);
                    Histogram::build(vals, lo, hi, bins)
                };
                (Some(pick(false)), Some(pick(true)))
            }
            None => (None, None),
        };
        Self { all, clean, noisy }
    }
}

fn push_histogram_rows(out: &mut String, epoch: usize, network: usize, quantity: &str, h: &SplitHistogram) {
    let parts = [("all", Some(&h.all)), ("clean", h.clean.as_ref()), ("noisy", h.noisy.as_ref())];
    for (split, hist) in parts {
        let Some(hist) = hist else { continue };
        for (bin, &count) in hist.counts.iter().enumerate() {
            let (lo, hi) = hist.bin_edges(bin);
            let _ = writeln!(out, "{epoch},{network},{quantity},{split},{bin},{lo:.16e},{hi:.16e},{count}");
        }
    }
}

/// Long-format CSV of every epoch's similarity and loss histograms.
pub fn histograms_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,network,quantity,split,bin,lo,hi,count\n");
    for m in metrics {
        let nets: [(usize, Option<&NetworkDiagnostics>); 2] = [(1, Some(&m.net1)), (2, m.net2.as_ref())];
        for (id, diag) in nets {
            let Some(d) = diag else { continue };
            push_histogram_rows(&mut out, m.epoch, id, "similarity", &d.similarity_histogram);
            push_histogram_rows(&mut out, m.epoch, id, "loss", &d.loss_histogram);
        }
    }
    out
}

pub fn export_histograms(metrics: &[EpochMetrics], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, histograms_csv(metrics)).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

/// Per-sample weights and similarities at the end of training.
pub fn weights_csv(samples: &FinalSamples, train: &Dataset) -> String {
    let mut out = String::from("index,label,true_label,corrupted,similarity_net1,w1,w2\n");
    for i in 0..train.len() {
        let truth = train.true_labels.as_ref().map(|t| t[i].to_string()).unwrap_or_default();
        let corrupted = train.corruption_mask.as_ref().map(|m| u8::from(m[i]).to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{i},{},{truth},{corrupted},{:.16e},{:.16e},{:.16e}",
            train.labels[i], samples.similarity_net1[i], samples.weights.w1[i], samples.weights.w2[i]
        );
    }
    out
}

pub fn export_weights(samples: &FinalSamples, train: &Dataset, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, weights_csv(samples, train)).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}
