//! Two-network noise-robust training.
//!
//! Each epoch trains both networks on the joint loss `L_wc + lambda * L_co`
//! using importance weights produced at the end of the previous epoch. After
//! the epoch, a full inference pass over the training set refits one beta
//! mixture per network and maps every sample to its clean posterior.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::harness::diagnostics::{weight_auc, Histogram, SplitHistogram, DEFAULT_BINS};
use crate::nnet::{
    adam_step, backward_from_logits, backward_pair, ce_losses, forward_batch, init_classifier, logit_grads_ce,
    ClassifierParams, NetState, NnetError, OptimizerState,
};
use crate::noise_model::{self, BetaMixture, DegenerateReason, FitConfig, NoiseModelError};

#[derive(Debug, Error)]
pub enum CotrainError {
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0}")]
    Misaligned(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite network output during inference")]
    NonFiniteOutput,
    #[error("weights for epoch {epoch} were produced at epoch {origin}")]
    StaleWeights { epoch: usize, origin: usize },
    #[error(transparent)]
    NoiseModel(#[from] NoiseModelError),
}

pub type Result<T> = std::result::Result<T, CotrainError>;

/// Training arms of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two independent CE networks, no weighting.
    Standard,
    /// One network, self-weighted by a similarity BMM.
    SimSingle,
    /// One network, self-weighted by a loss BMM.
    LossSingle,
    SimWeex,
    LossWeex,
    /// Weight exchange plus consistency loss.
    Resup,
    LossResup,
    /// Both networks weighted by the mean of the two weight streams.
    JocorAvg,
}

/// Which per-sample statistic the noise model is fit to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSignal {
    Similarity,
    Loss,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Standard,
        Variant::LossSingle,
        Variant::SimSingle,
        Variant::LossWeex,
        Variant::SimWeex,
        Variant::LossResup,
        Variant::Resup,
        Variant::JocorAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::SimSingle => "sim_single",
            Variant::LossSingle => "loss_single",
            Variant::SimWeex => "sim_weex",
            Variant::LossWeex => "loss_weex",
            Variant::Resup => "resup",
            Variant::LossResup => "loss_resup",
            Variant::JocorAvg => "jocor_avg",
        }
    }

    pub fn two_networks(self) -> bool {
        !matches!(self, Variant::SimSingle | Variant::LossSingle)
    }

    /// `None` when the variant trains on uniform weights.
    pub fn signal(self) -> Option<NoiseSignal> {
        match self {
            Variant::Standard => None,
            Variant::LossSingle | Variant::LossWeex | Variant::LossResup => Some(NoiseSignal::Loss),
            _ => Some(NoiseSignal::Similarity),
        }
    }

    /// Coefficient on the consistency loss given the configured lambda.
    pub fn consistency_coef(self, lambda: f64) -> f64 {
        match self {
            Variant::Resup | Variant::LossResup => lambda,
            // the JoCoR-style arm scales its agreement term by a tenth
            Variant::JocorAvg => 0.1 * lambda,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` after each milestone epoch.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Hidden widths; input and output widths come from the data.
    pub hidden_dims: Vec<usize>,
    /// Start both networks from the same initialization.
    pub tie_init: bool,
    pub fit: FitConfig,
    pub report_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Resup,
            lambda: 5.0,
            epochs: 30,
            batch_size: 96,
            lr: OptimizerState::DEFAULT_LR,
            lr_milestones: vec![10, 20],
            lr_decay: 0.1,
            warmup_epochs: 1,
            seed: 0,
            hidden_dims: vec![64, 64],
            tie_init: false,
            fit: FitConfig::default(),
            report_window: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CotrainError::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if self.epochs < 1 || self.warmup_epochs < 1 || self.batch_size < 1 || self.report_window < 1 {
            return bad("epochs, warmup_epochs, batch_size and report_window must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("lr and lr_decay must be positive".into());
        }
        let f = &self.fit;
        if f.max_iters == 0 || [f.tol, f.clamp_eps, f.min_variance, f.overlap_threshold].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return bad(format!("fit config entries must be positive: {f:?}"));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden_dims);
        dims.push(classes);
        dims
    }

    /// Learning rate for 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Per-sample importance weights for both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    /// Epoch whose parameters produced these weights; 0 for the warm-up ones.
    pub epoch_of_origin: usize,
}

impl SampleWeights {
    pub fn ones(n: usize) -> Self {
        Self { w1: vec![1.0; n], w2: vec![1.0; n], epoch_of_origin: 0 }
    }
}

/// Batch mean of `w2_i * lce1_i + w1_i * lce2_i`.
pub fn weighted_ce(lce1: &[f64], lce2: &[f64], w1: &[f64], w2: &[f64]) -> Result<f64> {
    let n = lce1.len();
    if lce2.len() != n || w1.len() != n || w2.len() != n {
        return Err(CotrainError::Misaligned(format!(
            "lce1 {n}, lce2 {}, w1 {}, w2 {}",
            lce2.len(),
            w1.len(),
            w2.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n).map(|i| w2[i] * lce1[i] + w1[i] * lce2[i]).sum();
    Ok(total / n as f64)
}

/// Batch mean of `1/c * sum_k (f1_ik - f2_ik)^2`.
pub fn consistency_loss(f1: ArrayView2<f64>, f2: ArrayView2<f64>) -> Result<f64> {
    if f1.dim() != f2.dim() {
        return Err(CotrainError::Misaligned(format!("{:?} vs {:?}", f1.dim(), f2.dim())));
    }
    let (n, c) = f1.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = f1.iter().zip(f2.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / (c as f64 * n as f64))
}

pub fn joint_loss(lwc: f64, lco: f64, lambda: f64) -> f64 {
    lwc + lambda * lco
}

/// Outcome of one noise-model refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    NotFitted,
    Fitted { mixture: BetaMixture, iterations: usize, converged: bool },
    Degenerate { reason: DegenerateReason },
}

/// Full-training-set statistics of one network.
#[derive(Debug, Clone)]
pub struct InferencePass {
    pub similarities: Vec<f64>,
    pub losses: Vec<f64>,
}

pub fn inference_pass(net: &ClassifierParams, ds: &Dataset) -> Result<InferencePass> {
    let mut similarities = Vec::with_capacity(ds.len());
    let mut losses = Vec::with_capacity(ds.len());
    for (chunk_idx, chunk) in ds.features.axis_chunks_iter(Axis(0), INFERENCE_CHUNK).enumerate() {
        let out = forward_batch(net, chunk)?;
        if out.probs.iter().any(|v| !v.is_finite()) {
            return Err(CotrainError::NonFiniteOutput);
        }
        let offset = chunk_idx * INFERENCE_CHUNK;
        let labels = &ds.labels[offset..offset + chunk.nrows()];
        for (row, &y) in out.probs.rows().into_iter().zip(labels) {
            similarities.push(noise_model::cosine_similarity(row, y)?.value());
        }
        losses.extend(ce_losses(out.probs.view(), labels)?);
    }
    Ok(InferencePass { similarities, losses })
}

const INFERENCE_CHUNK: usize = 512;

/// Values the mixture is fit to: similarities, or `1 - loss / max_loss` so
/// that clean samples sit at the high end in both cases.
pub fn noise_signal_values(pass: &InferencePass, signal: NoiseSignal) -> Vec<f64> {
    match signal {
        NoiseSignal::Similarity => pass.similarities.clone(),
        NoiseSignal::Loss => {
            let max = pass.losses.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                pass.losses.iter().map(|l| 1.0 - l / max).collect()
            } else {
                vec![1.0; pass.losses.len()]
            }
        }
    }
}

/// Weights from a fitted mixture, or all ones when the fit is degenerate.
pub fn weights_from_values(values: &[f64], cfg: &FitConfig) -> Result<(Vec<f64>, FitOutcome)> {
    match noise_model::fit_bmm(values, cfg) {
        Ok(fit) => {
            let weights = values
                .iter()
                .map(|&v| noise_model::posterior_clean(&fit.mixture, noise_model::clamp(v, cfg.clamp_eps)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let outcome =
                FitOutcome::Fitted { mixture: fit.mixture, iterations: fit.iterations, converged: fit.converged };
            Ok((weights, outcome))
        }
        Err(NoiseModelError::Degenerate(reason)) => Ok((vec![1.0; values.len()], FitOutcome::Degenerate { reason })),
        Err(e) => Err(e.into()),
    }
}

/// Inference pass, mixture fit and posterior weights for one network.
pub fn refresh_weights(
    net: &ClassifierParams,
    ds: &Dataset,
    signal: NoiseSignal,
    cfg: &FitConfig,
) -> Result<(Vec<f64>, FitOutcome, InferencePass)> {
    let pass = inference_pass(net, ds)?;
    let (weights, outcome) = weights_from_values(&noise_signal_values(&pass, signal), cfg)?;
    Ok((weights, outcome, pass))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub weighted_ce: f64,
    pub consistency: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl WeightSummary {
    pub fn of(w: &[f64]) -> Self {
        let n = w.len().max(1) as f64;
        Self {
            mean: w.iter().sum::<f64>() / n,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// End-of-epoch diagnostics for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDiagnostics {
    pub test_accuracy: f64,
    /// Weights produced from this epoch's parameters (consumed next epoch).
    pub weights: WeightSummary,
    pub weight_auc: Option<f64>,
    pub fit: FitOutcome,
    pub similarity_histogram: SplitHistogram,
    pub loss_histogram: SplitHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: LossTerms,
    pub test_accuracy_net1: f64,
    pub test_accuracy_net2: Option<f64>,
    pub net1: NetworkDiagnostics,
    pub net2: Option<NetworkDiagnostics>,
}

/// Networks and optimizers of one run. `net2` is absent for single-network variants.
#[derive(Debug, Clone, PartialEq)]
pub struct CoTrainState {
    pub net1: ClassifierParams,
    pub opt1: OptimizerState,
    pub net2: Option<(ClassifierParams, OptimizerState)>,
}

/// Deterministic sub-seed derivation (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initialization seeds for the two networks.
pub fn network_seeds(cfg: &TrainConfig) -> (u64, u64) {
    let s1 = derive_seed(cfg.seed, 1);
    (s1, if cfg.tie_init { s1 } else { derive_seed(cfg.seed, 2) })
}

/// Sample visiting order for a 1-based epoch.
pub fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, 3), epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl CoTrainState {
    pub fn new(cfg: &TrainConfig, input: usize, classes: usize) -> Result<Self> {
        let dims = cfg.layer_dims(input, classes);
        let (s1, s2) = network_seeds(cfg);
        let net1 = init_classifier(&dims, s1)?;
        let opt1 = OptimizerState::new(&net1, cfg.lr);
        let net2 = if cfg.variant.two_networks() {
            let net = init_classifier(&dims, s2)?;
            let opt = OptimizerState::new(&net, cfg.lr);
            Some((net, opt))
        } else {
            None
        };
        Ok(Self { net1, opt1, net2 })
    }
}

fn mean_of(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// One pass over the training set. `epoch` is 1-based and `weights` must have
/// been produced at `epoch - 1`.
pub fn train_epoch(
    state: &mut CoTrainState,
    ds: &Dataset,
    weights: &SampleWeights,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossTerms> {
    let n = ds.len();
    if weights.w1.len() != n || weights.w2.len() != n {
        return Err(CotrainError::Misaligned(format!("{} samples, {} weights", n, weights.w1.len())));
    }
    if weights.epoch_of_origin + 1 != epoch {
        return Err(CotrainError::StaleWeights { epoch, origin: weights.epoch_of_origin });
    }
    let variant = cfg.variant;
    let lambda = variant.consistency_coef(cfg.lambda);
    let lr = cfg.lr_at(epoch);
    state.opt1.lr = lr;
    if let Some((_, opt2)) = state.net2.as_mut() {
        opt2.lr = lr;
    }

    let order = batch_order(cfg.seed, epoch, n);
    let mut sums = LossTerms { weighted_ce: 0.0, consistency: 0.0, joint: 0.0 };
    for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
        let x = ds.features.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let w1: Vec<f64> = idx.iter().map(|&i| weights.w1[i]).collect();
        let w2: Vec<f64> = idx.iter().map(|&i| weights.w2[i]).collect();

        let f1 = forward_batch(&state.net1, x.view())?;
        let lce1 = ce_losses(f1.probs.view(), &labels)?;

        let terms = match state.net2.as_mut() {
            None => {
                // self-weighted single network (w2 mirrors w1)
                let lwc = weighted_ce(&lce1, &vec![0.0; lce1.len()], &vec![0.0; lce1.len()], &w1)?;
                let terms = LossTerms { weighted_ce: lwc, consistency: 0.0, joint: lwc };
                check_finite(terms, epoch, batch_idx)?;
                let d = logit_grads_ce(f1.probs.view(), &labels, &w1)?;
                let g1 = backward_from_logits(&state.net1, &f1, d)?;
                adam_step(&mut state.net1, &g1, &mut state.opt1)?;
                terms
            }
            Some((net2, opt2)) => {
                let f2 = forward_batch(net2, x.view())?;
                let lce2 = ce_losses(f2.probs.view(), &labels)?;
                // ce_coef1 multiplies net 1's CE, ce_coef2 net 2's
                let (ce_coef1, ce_coef2) = match variant {
                    Variant::Standard => (vec![1.0; idx.len()], vec![1.0; idx.len()]),
                    Variant::JocorAvg => {
                        let avg = mean_of(&w1, &w2);
                        (avg.clone(), avg)
                    }
                    _ => (w2, w1),
                };
                let lwc = weighted_ce(&lce1, &lce2, &ce_coef2, &ce_coef1)?;
                let lco = consistency_loss(f1.probs.view(), f2.probs.view())?;
                let terms = LossTerms { weighted_ce: lwc, consistency: lco, joint: joint_loss(lwc, lco, lambda) };
                check_finite(terms, epoch, batch_idx)?;
                let (g1, g2) = backward_pair(
                    NetState { params: &state.net1, forward: &f1 },
                    NetState { params: net2, forward: &f2 },
                    &labels,
                    &ce_coef1,
                    &ce_coef2,
                    lambda,
                )?;
                adam_step(&mut state.net1, &g1, &mut state.opt1)?;
                adam_step(net2, &g2, opt2)?;
                terms
            }
        };
        let share = idx.len() as f64 / n as f64;
        sums.weighted_ce += terms.weighted_ce * share;
        sums.consistency += terms.consistency * share;
        sums.joint += terms.joint * share;
    }
    Ok(sums)
}

fn check_finite(t: LossTerms, epoch: usize, batch: usize) -> Result<()> {
    if t.joint.is_finite() {
        Ok(())
    } else {
        Err(CotrainError::Diverged { epoch, batch, loss: t.joint })
    }
}

/// Fraction of samples whose argmax prediction equals the observed label.
pub fn accuracy(net: &ClassifierParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (chunk_idx, chunk) in ds.features.axis_chunks_iter(Axis(0), INFERENCE_CHUNK).enumerate() {
        let out = forward_batch(net, chunk)?;
        for (i, row) in out.probs.rows().into_iter().enumerate() {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == ds.labels[chunk_idx * INFERENCE_CHUNK + i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Per-sample state at the end of training, for weight inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSamples {
    pub weights: SampleWeights,
    pub similarity_net1: Vec<f64>,
    pub similarity_net2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub window: usize,
    /// Mean net-1 test accuracy over the last `window` epochs.
    pub last_window_accuracy: f64,
    pub final_weight_auc_net1: Option<f64>,
    pub final_weight_auc_net2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub epochs: Vec<EpochMetrics>,
    pub summary: RunSummary,
    pub final_samples: FinalSamples,
    pub state: CoTrainState,
}

/// Mean of the last `window` values (all of them when shorter).
pub fn last_window_mean(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn diagnostics(
    net: &ClassifierParams,
    train: &Dataset,
    test: &Dataset,
    signal: Option<NoiseSignal>,
    consume: bool,
    fit_cfg: &FitConfig,
) -> Result<(NetworkDiagnostics, Vec<f64>, InferencePass)> {
    let pass = inference_pass(net, train)?;
    let (weights, fit) = match signal {
        Some(sig) if consume => weights_from_values(&noise_signal_values(&pass, sig), fit_cfg)?,
        _ => (vec![1.0; train.len()], FitOutcome::NotFitted),
    };
    let mask = train.corruption_mask.as_deref();
    let loss_hi = pass.losses.iter().copied().fold(0.0, f64::max);
    let diag = NetworkDiagnostics {
        test_accuracy: accuracy(net, test)?,
        weights: WeightSummary::of(&weights),
        weight_auc: mask.and_then(|m| weight_auc(&weights, m).ok()),
        fit,
        similarity_histogram: SplitHistogram::build(&pass.similarities, mask, 0.0, 1.0, DEFAULT_BINS),
        loss_histogram: SplitHistogram::build(&pass.losses, mask, 0.0, Histogram::upper_edge(loss_hi), DEFAULT_BINS),
    };
    Ok((diag, weights, pass))
}

/// Trains for `cfg.epochs` epochs. Weights are all ones until the end of epoch
/// `warmup_epochs`, after which each network's mixture is refit every epoch.
pub fn run_training(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    train.validate().map_err(|e| CotrainError::InvalidConfig(e.to_string()))?;
    if test.dim() != train.dim() {
        return Err(CotrainError::Misaligned(format!("train dim {} vs test dim {}", train.dim(), test.dim())));
    }
    let classes = train.class_count.max(test.class_count);
    let mut state = CoTrainState::new(cfg, train.dim(), classes)?;
    let mut weights = SampleWeights::ones(train.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let signal = cfg.variant.signal();
    let mut last_passes = None;

    for epoch in 1..=cfg.epochs {
        let train_loss = train_epoch(&mut state, train, &weights, cfg, epoch)?;
        let consume = epoch >= cfg.warmup_epochs;
        let (d1, w1, p1) = diagnostics(&state.net1, train, test, signal, consume, &cfg.fit)?;
        let second = match &state.net2 {
            Some((net2, _)) => Some(diagnostics(net2, train, test, signal, consume, &cfg.fit)?),
            None => None,
        };
        let (d2, w2, p2) = match second {
            Some((d, w, p)) => (Some(d), w, Some(p)),
            None => (None, w1.clone(), None),
        };
        weights = SampleWeights { w1, w2, epoch_of_origin: epoch };
        history.push(EpochMetrics {
            epoch,
            lr: cfg.lr_at(epoch),
            train_loss,
            test_accuracy_net1: d1.test_accuracy,
            test_accuracy_net2: d2.as_ref().map(|d| d.test_accuracy),
            net1: d1,
            net2: d2,
        });
        last_passes = Some((p1, p2));
    }

    let (p1, p2) = last_passes.expect("epochs >= 1");
    let accs: Vec<f64> = history.iter().map(|m| m.test_accuracy_net1).collect();
    let last = history.last().unwrap();
    let summary = RunSummary {
        window: cfg.report_window,
        last_window_accuracy: last_window_mean(&accs, cfg.report_window),
        final_weight_auc_net1: last.net1.weight_auc,
        final_weight_auc_net2: last.net2.as_ref().and_then(|d| d.weight_auc),
    };
    let final_samples = FinalSamples {
        weights,
        similarity_net1: p1.similarities,
        similarity_net2: p2.map(|p| p.similarities),
    };
    Ok(TrainingRun { epochs: history, summary, final_samples, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{corrupt_symmetric, gen_blobs, BlobSpec};
    use ndarray::array;

    fn small_data(seed: u64) -> (Dataset, Dataset) {
        let ds = gen_blobs(&BlobSpec { n: 300, classes: 3, dim: 4, separation: 4.0, seed }).unwrap();
        let (train, test) = ds.split_at(240);
        (corrupt_symmetric(&train, 0.2, seed).unwrap(), test)
    }

    fn quick_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 4,
            batch_size: 32,
            lr: 1e-2,
            lr_milestones: vec![],
            hidden_dims: vec![8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn weighted_ce_values() {
        let l1 = [0.5, 1.5, 2.0];
        let l2 = [1.0, 0.2, 0.3];
        let ones = [1.0; 3];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / 3.0;
        assert!((weighted_ce(&l1, &l2, &ones, &ones).unwrap() - (mean(&l1) + mean(&l2))).abs() < 1e-15);
        assert_eq!(weighted_ce(&[2.0], &[4.0], &[0.5], &[0.25]).unwrap(), 2.5);
        assert_eq!(weighted_ce(&l1, &l2, &[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!(weighted_ce(&l1, &l2, &[1.0; 2], &ones).is_err());
    }

    #[test]
    fn weighted_ce_exchanges_weights() {
        // perturbing w1 only changes net 2's term
        let base = weighted_ce(&[1.0], &[0.0], &[0.3], &[0.7]).unwrap();
        assert_eq!(base, weighted_ce(&[1.0], &[0.0], &[0.9], &[0.7]).unwrap());
        let base = weighted_ce(&[0.0], &[1.0], &[0.3], &[0.7]).unwrap();
        assert_eq!(base, weighted_ce(&[0.0], &[1.0], &[0.3], &[0.1]).unwrap());
    }

    #[test]
    fn consistency_values() {
        let a = array![[0.2, 0.3, 0.5]];
        assert_eq!(consistency_loss(a.view(), a.view()).unwrap(), 0.0);
        let e0 = array![[1.0, 0.0, 0.0, 0.0]];
        let e1 = array![[0.0, 1.0, 0.0, 0.0]];
        assert_eq!(consistency_loss(e0.view(), e1.view()).unwrap(), 0.5);
        let h = array![[0.5, 0.5]];
        let one = array![[1.0, 0.0]];
        assert_eq!(consistency_loss(h.view(), one.view()).unwrap(), 0.25);
        assert_eq!(consistency_loss(one.view(), h.view()).unwrap(), 0.25);
        assert!(consistency_loss(h.view(), e0.view()).is_err());
    }

    #[test]
    fn joint_values() {
        assert_eq!(joint_loss(1.3, 0.4, 0.0), 1.3);
        assert!((joint_loss(1.0, 0.2, 5.0) - 2.0).abs() < 1e-15);
        assert_eq!(joint_loss(0.7, 0.0, 9.0), 0.7);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 2e-4);
        assert_eq!(cfg.lr_at(10), 2e-4);
        assert!((cfg.lr_at(11) - 2e-5).abs() < 1e-18);
        assert!((cfg.lr_at(21) - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig { lambda: -1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.lambda = 5.0;
        cfg.warmup_epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("crossde".parse::<Variant>().is_err());
    }

    #[test]
    fn separated_similarities_give_extreme_weights() {
        let mut values = Vec::new();
        for i in 0..200 {
            let jitter = (i as f64 * 0.618).fract() * 0.04 - 0.02;
            values.push(if i % 2 == 0 { 0.1 + jitter } else { 0.9 + jitter });
        }
        let (w, outcome) = weights_from_values(&values, &FitConfig::default()).unwrap();
        assert!(matches!(outcome, FitOutcome::Fitted { .. }));
        for (v, w) in values.iter().zip(&w) {
            if *v < 0.5 {
                assert!(*w < 1e-3, "{v} -> {w}");
            } else {
                assert!(*w > 1.0 - 1e-3, "{v} -> {w}");
            }
        }
    }

    #[test]
    fn constant_similarities_fall_back_to_ones() {
        let (w, outcome) = weights_from_values(&[0.4; 50], &FitConfig::default()).unwrap();
        assert!(matches!(outcome, FitOutcome::Degenerate { .. }));
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn refreshed_weights_are_bounded() {
        let (train, _) = small_data(1);
        let net = init_classifier(&[4, 8, 3], 3).unwrap();
        for signal in [NoiseSignal::Similarity, NoiseSignal::Loss] {
            let (w, _, pass) = refresh_weights(&net, &train, signal, &FitConfig::default()).unwrap();
            assert_eq!(w.len(), train.len());
            assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(pass.similarities.iter().all(|&s| s > 0.0 && s <= 1.0));
        }
    }

    #[test]
    fn single_epoch_consumes_no_fit() {
        let (train, test) = small_data(2);
        let cfg = TrainConfig { epochs: 1, ..quick_cfg(Variant::Resup) };
        let run = run_training(&train, &test, &cfg).unwrap();
        assert_eq!(run.epochs.len(), 1);
        assert_eq!(run.state.opt1.step_count, 8);
    }

    #[test]
    fn tied_networks_stay_in_agreement() {
        let (train, test) = small_data(3);
        let cfg = TrainConfig { epochs: 1, tie_init: true, ..quick_cfg(Variant::Resup) };
        let mut state = CoTrainState::new(&cfg, train.dim(), 3).unwrap();
        let weights = SampleWeights::ones(train.len());
        let terms = train_epoch(&mut state, &train, &weights, &cfg, 1).unwrap();
        assert_eq!(terms.consistency, 0.0);
        assert_eq!(&state.net1, &state.net2.as_ref().unwrap().0);
        let _ = test;
    }

    #[test]
    fn stale_weights_rejected() {
        let (train, _) = small_data(4);
        let cfg = quick_cfg(Variant::Resup);
        let mut state = CoTrainState::new(&cfg, train.dim(), 3).unwrap();
        let weights = SampleWeights::ones(train.len());
        assert!(matches!(
            train_epoch(&mut state, &train, &weights, &cfg, 2),
            Err(CotrainError::StaleWeights { epoch: 2, origin: 0 })
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let (train, test) = small_data(5);
        for variant in Variant::ALL {
            let cfg = quick_cfg(variant);
            let a = run_training(&train, &test, &cfg).unwrap();
            let b = run_training(&train, &test, &cfg).unwrap();
            assert_eq!(a.epochs, b.epochs, "{variant}");
            assert_eq!(a.state, b.state);
        }
    }

    #[test]
    fn metrics_are_consistent() {
        let (train, test) = small_data(6);
        let run = run_training(&train, &test, &quick_cfg(Variant::Resup)).unwrap();
        for m in &run.epochs {
            assert!((0.0..=1.0).contains(&m.test_accuracy_net1));
            let h = &m.net1.similarity_histogram;
            assert_eq!(h.all.counts.iter().sum::<u64>(), train.len() as u64);
            assert_eq!(m.net1.similarity_histogram.all.counts.len(), 50);
        }
        let accs: Vec<f64> = run.epochs.iter().map(|m| m.test_accuracy_net1).collect();
        assert_eq!(run.summary.last_window_accuracy, last_window_mean(&accs, 5));
        assert_eq!(run.final_samples.weights.epoch_of_origin, 4);
    }

    #[test]
    fn single_network_variant_has_no_second_net() {
        let (train, test) = small_data(7);
        let run = run_training(&train, &test, &quick_cfg(Variant::SimSingle)).unwrap();
        assert!(run.state.net2.is_none());
        assert!(run.epochs.iter().all(|m| m.test_accuracy_net2.is_none()));
        assert!(matches!(run.epochs[1].net1.fit, FitOutcome::Fitted { .. } | FitOutcome::Degenerate { .. }));
    }
}
