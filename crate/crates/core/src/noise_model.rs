//! Similarity-based label-noise model.
//!
//! Each training sample gets a similarity `S = f_y / ||f||` between its
//! softmax output and its (possibly wrong) one-hot label. A two-component beta
//! mixture is fit to all similarities by EM; the posterior of the
//! higher-mean component is the sample's importance weight.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseModelError {
    #[error("value {0} outside the open unit interval")]
    OutOfDomain(f64),
    #[error("beta shape parameters must be positive and finite (alpha={alpha}, beta={beta})")]
    InvalidShape { alpha: f64, beta: f64 },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least {needed} samples to fit, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate fit: {0}")]
    Degenerate(DegenerateReason),
}

/// Why EM did not produce a usable two-component model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegenerateReason {
    /// Component means closer than `overlap_threshold`.
    Overlap { gap: f64 },
    /// Moment matching produced `t <= 0`.
    NonPositiveShape { iteration: usize },
    /// A mixing coefficient fell to zero.
    ComponentCollapsed { iteration: usize },
}

impl std::fmt::Display for DegenerateReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Overlap { gap } => write!(f, "component means differ by only {gap:.6}"),
            Self::NonPositiveShape { iteration } => {
                write!(f, "non-positive moment-matched shape at iteration {iteration}")
            }
            Self::ComponentCollapsed { iteration } => write!(f, "component collapsed at iteration {iteration}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, NoiseModelError>;

/// Cosine similarity between a softmax output and a one-hot target, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Similarity(f64);

impl Similarity {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(NoiseModelError::OutOfDomain(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `f_label / ||f||_2`.
pub fn cosine_similarity(probs: ArrayView1<f64>, label: usize) -> Result<Similarity> {
    if label >= probs.len() {
        return Err(NoiseModelError::LabelOutOfRange { label, classes: probs.len() });
    }
    if probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NoiseModelError::OutOfDomain(probs[label]));
    }
    let norm = probs.dot(&probs).sqrt();
    // an underflowed softmax entry can be exactly zero; keep S strictly positive
    Similarity::new((probs[label] / norm).clamp(f64::MIN_POSITIVE, 1.0))
}

fn check_shape(alpha: f64, beta: f64) -> Result<()> {
    if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
        Ok(())
    } else {
        Err(NoiseModelError::InvalidShape { alpha, beta })
    }
}

fn check_unit(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(NoiseModelError::OutOfDomain(s))
    }
}

/// Beta(alpha, beta) density at `s`, evaluated through log-gamma.
pub fn beta_pdf(s: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_unit(s)?;
    check_shape(alpha, beta)?;
    Ok(BetaComponent { alpha, beta }.ln_pdf(s).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaComponent {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaComponent {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        check_shape(alpha, beta)?;
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    fn ln_norm(&self) -> f64 {
        ln_gamma(self.alpha + self.beta) - ln_gamma(self.alpha) - ln_gamma(self.beta)
    }

    fn ln_pdf_with_norm(&self, ln_norm: f64, s: f64) -> f64 {
        ln_norm + (self.alpha - 1.0) * s.ln() + (self.beta - 1.0) * (-s).ln_1p()
    }

    fn ln_pdf(&self, s: f64) -> f64 {
        self.ln_pdf_with_norm(self.ln_norm(), s)
    }
}

/// Two-component beta mixture. `clean_index` names the higher-mean component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub mixing: [f64; 2],
    pub components: [BetaComponent; 2],
    pub clean_index: usize,
}

impl BetaMixture {
    /// Validates the invariants and assigns `clean_index` to the higher-mean
    /// component (component 0 on an exact tie).
    pub fn new(mixing: [f64; 2], components: [BetaComponent; 2]) -> Result<Self> {
        for c in &components {
            check_shape(c.alpha, c.beta)?;
        }
        if mixing.iter().any(|&d| !(0.0..=1.0).contains(&d)) || ((mixing[0] + mixing[1]) - 1.0).abs() > 1e-9 {
            return Err(NoiseModelError::InvalidMixture(format!("mixing coefficients {mixing:?}")));
        }
        let clean_index = if components[1].mean() > components[0].mean() { 1 } else { 0 };
        Ok(Self { mixing, components, clean_index })
    }

    pub fn noisy_index(&self) -> usize {
        1 - self.clean_index
    }

    pub fn clean(&self) -> &BetaComponent {
        &self.components[self.clean_index]
    }

    pub fn noisy(&self) -> &BetaComponent {
        &self.components[self.noisy_index()]
    }

    pub fn clean_mixing(&self) -> f64 {
        self.mixing[self.clean_index]
    }

    fn weighted_ln_densities(&self, s: f64) -> [f64; 2] {
        [0, 1].map(|m| self.mixing[m].ln() + self.components[m].ln_pdf(s))
    }
}

/// `delta_0 p(s|0) + delta_1 p(s|1)`.
pub fn mixture_pdf(mix: &BetaMixture, s: f64) -> Result<f64> {
    check_unit(s)?;
    Ok(mix.weighted_ln_densities(s).iter().map(|v| v.exp()).sum())
}

/// Posterior probabilities `(p(clean | s), p(noisy | s))`; they sum to 1.
pub fn posteriors(mix: &BetaMixture, s: f64) -> Result<(f64, f64)> {
    check_unit(s)?;
    let lw = mix.weighted_ln_densities(s);
    let (lc, ln) = (lw[mix.clean_index], lw[mix.noisy_index()]);
    let clean = if lc == f64::NEG_INFINITY {
        0.0
    } else {
        1.0 / (1.0 + (ln - lc).exp())
    };
    Ok((clean, 1.0 - clean))
}

/// Importance weight: posterior probability of the clean component.
pub fn posterior_clean(mix: &BetaMixture, s: f64) -> Result<f64> {
    Ok(posteriors(mix, s)?.0)
}

/// Sum of log mixture density over samples clamped into `[clamp_eps, 1 - clamp_eps]`.
pub fn log_likelihood(mix: &BetaMixture, values: &[f64], clamp_eps: f64) -> f64 {
    let norms = mix.components.map(|c| c.ln_norm());
    values
        .iter()
        .map(|&v| {
            let s = clamp(v, clamp_eps);
            log_sum_exp2(
                mix.mixing[0].ln() + mix.components[0].ln_pdf_with_norm(norms[0], s),
                mix.mixing[1].ln() + mix.components[1].ln_pdf_with_norm(norms[1], s),
            )
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub clamp_eps: f64,
    pub min_variance: f64,
    pub overlap_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iters: 30, tol: 1e-6, clamp_eps: 1e-4, min_variance: 1e-6, overlap_threshold: 0.02 }
    }
}

pub const MIN_FIT_SAMPLES: usize = 10;

/// Result of a successful EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmmFit {
    pub mixture: BetaMixture,
    /// Observed-data log-likelihood after initialization and after every iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn clamp(v: f64, eps: f64) -> f64 {
    v.clamp(eps, 1.0 - eps)
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Weighted moment matching. `None` when `t <= 0`.
fn moment_match(values: &[f64], resp: impl Iterator<Item = f64>, min_variance: f64) -> Option<BetaComponent> {
    let (mut sw, mut swx, mut swxx) = (0.0, 0.0, 0.0);
    for (&x, w) in values.iter().zip(resp) {
        sw += w;
        swx += w * x;
        swxx += w * x * x;
    }
    if sw <= 0.0 {
        return None;
    }
    let mean = swx / sw;
    let var = (swxx / sw - mean * mean).max(0.0);
    let t = mean * (1.0 - mean) / var.max(min_variance) - 1.0;
    if t <= 0.0 || !t.is_finite() {
        return None;
    }
    Some(BetaComponent { alpha: mean * t, beta: (1.0 - mean) * t })
}

/// Responsibility-weighted expected log density of one component.
fn expected_ln_pdf(c: &BetaComponent, values: &[f64], resp: &[f64]) -> f64 {
    let norm = c.ln_norm();
    values.iter().zip(resp).map(|(&s, &r)| r * c.ln_pdf_with_norm(norm, s)).sum()
}

/// Fits a two-component beta mixture by EM.
///
/// Initialization splits the sorted samples at the median and moment-matches
/// each half. Each M-step sets mixing weights to mean responsibilities and
/// shapes by weighted moment matching. A moment-matched shape that lowers the
/// component's expected complete-data log-likelihood is pulled back toward the
/// previous shape by halving, so the observed log-likelihood never decreases.
pub fn fit_bmm(values: &[f64], cfg: &FitConfig) -> Result<BmmFit> {
    if values.len() < MIN_FIT_SAMPLES {
        return Err(NoiseModelError::TooFewSamples { needed: MIN_FIT_SAMPLES, got: values.len() });
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(NoiseModelError::OutOfDomain(bad));
    }
    let xs: Vec<f64> = values.iter().map(|&v| clamp(v, cfg.clamp_eps)).collect();
    let n = xs.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut resp = [vec![0.0; n], vec![0.0; n]];
    for (rank, &i) in order.iter().enumerate() {
        resp[usize::from(rank >= n / 2)][i] = 1.0;
    }
    let degenerate = |r| NoiseModelError::Degenerate(r);

    let mut components = [0, 1].map(|m| moment_match(&xs, resp[m].iter().copied(), cfg.min_variance));
    let mut comps = match components {
        [Some(a), Some(b)] => [a, b],
        _ => return Err(degenerate(DegenerateReason::NonPositiveShape { iteration: 0 })),
    };
    let mut mixing = [(n / 2) as f64 / n as f64, (n - n / 2) as f64 / n as f64];

    let ll_of = |mixing: [f64; 2], comps: [BetaComponent; 2]| {
        let mix = BetaMixture { mixing, components: comps, clean_index: 0 };
        log_likelihood(&mix, &xs, cfg.clamp_eps)
    };
    let mut trace = vec![ll_of(mixing, comps)];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        iterations = iter;
        // E-step
        let norms = comps.map(|c| c.ln_norm());
        let ln_mix = mixing.map(f64::ln);
        for (i, &s) in xs.iter().enumerate() {
            let l0 = ln_mix[0] + comps[0].ln_pdf_with_norm(norms[0], s);
            let l1 = ln_mix[1] + comps[1].ln_pdf_with_norm(norms[1], s);
            let lse = log_sum_exp2(l0, l1);
            resp[0][i] = (l0 - lse).exp();
            resp[1][i] = 1.0 - resp[0][i];
        }

        // M-step
        let totals = [resp[0].iter().sum::<f64>(), resp[1].iter().sum::<f64>()];
        if totals.iter().any(|&t| t <= 1e-12 * n as f64) {
            return Err(degenerate(DegenerateReason::ComponentCollapsed { iteration: iter }));
        }
        mixing = [totals[0] / n as f64, totals[1] / n as f64];
        components = [0, 1].map(|m| moment_match(&xs, resp[m].iter().copied(), cfg.min_variance));
        for m in 0..2 {
            let Some(candidate) = components[m] else {
                return Err(degenerate(DegenerateReason::NonPositiveShape { iteration: iter }));
            };
            comps[m] = guarded_update(comps[m], candidate, &xs, &resp[m]);
        }

        let ll = ll_of(mixing, comps);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() <= cfg.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let gap = (comps[0].mean() - comps[1].mean()).abs();
    if gap < cfg.overlap_threshold {
        return Err(degenerate(DegenerateReason::Overlap { gap }));
    }
    // renormalize away rounding so the invariant check is exact
    let mixing = [mixing[0], 1.0 - mixing[0]];
    let mixture = BetaMixture::new(mixing, comps)?;
    Ok(BmmFit { mixture, log_likelihood_trace: trace, iterations, converged })
}

fn guarded_update(old: BetaComponent, candidate: BetaComponent, xs: &[f64], resp: &[f64]) -> BetaComponent {
    let base = expected_ln_pdf(&old, xs, resp);
    let mut step = 1.0;
    for _ in 0..40 {
        let trial = BetaComponent {
            alpha: old.alpha + step * (candidate.alpha - old.alpha),
            beta: old.beta + step * (candidate.beta - old.beta),
        };
        if expected_ln_pdf(&trial, xs, resp) >= base {
            return trial;
        }
        step *= 0.5;
    }
    old
}
