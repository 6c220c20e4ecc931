//! A small fully connected softmax classifier with hand-written gradients.
//!
//! Hidden layers use ReLU, the output layer is a softmax. Gradients are
//! derived analytically for the two-network objective
//!
//! ```text
//! L = mean_i(c1_i * CE1_i + c2_i * CE2_i) + lambda * mean_i(1/c * sum_k (f1_ik - f2_ik)^2)
//! ```
//!
//! where `c1`, `c2` are per-sample CE coefficients. With weight exchange,
//! `c1 = w2` and `c2 = w1`. Everything runs in `f64`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Lower clamp applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("layer dims must have at least two entries, all >= 1 (got {0:?})")]
    InvalidLayerDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in input features")]
    NonFiniteInput,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target vector is not one-hot")]
    NotOneHot,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda must be non-negative and finite (got {0})")]
    InvalidLambda(f64),
    #[error("non-finite gradient; the run has diverged")]
    NonFiniteGradient,
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Weights and biases of one MLP. `weights[l]` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Gradient (or moment) buffers laid out exactly like [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ClassifierParams {
    /// Builds a parameter set from explicit matrices. Shapes must chain.
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "{} weight matrices, {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *layer_dims.last().unwrap() || w.ncols() != b.len() {
                return Err(NnetError::ShapeMismatch(format!("layer {l} does not chain")));
            }
            layer_dims.push(w.ncols());
        }
        if layer_dims.contains(&0) {
            return Err(NnetError::InvalidLayerDims(layer_dims));
        }
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite()))
            || biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(NnetError::NonFiniteInput);
        }
        Ok(Self { layer_dims, weights, biases })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters flattened layer by layer, weights (row-major) then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in 0..self.weights.len() {
            let (r, c) = self.weights[l].dim();
            if index < r * c {
                return &mut self.weights[l][[index / c, index % c]];
            }
            index -= r * c;
            if index < self.biases[l].len() {
                return &mut self.biases[l][index];
            }
            index -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, params: &ClassifierParams) -> bool {
        self.weights.len() == params.weights.len()
            && self.biases.len() == params.biases.len()
            && self.weights.iter().zip(&params.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&params.biases).all(|(a, b)| a.len() == b.len())
    }
}

/// He-style initialization: `N(0, 2 / fan_in)` weights, zero biases.
pub fn init_classifier(layer_dims: &[usize], seed: u64) -> Result<ClassifierParams> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(NnetError::InvalidLayerDims(layer_dims.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(ClassifierParams { layer_dims: layer_dims.to_vec(), weights, biases })
}

/// Softmax output for a single sample.
#[derive(Debug, Clone)]
pub struct SoftmaxOutput {
    pub probs: Array1<f64>,
    /// Layer inputs: `cache[0]` is the sample, `cache[l]` the post-ReLU hidden layer `l`.
    pub cache: Vec<Array1<f64>>,
}

/// Softmax outputs for a minibatch together with the activations backprop needs.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `batch x classes`.
    pub probs: Array2<f64>,
    /// `activations[0]` is the input batch, `activations[l]` the post-ReLU output of hidden layer `l`.
    pub activations: Vec<Array2<f64>>,
}

impl BatchForward {
    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }

    pub fn sample(&self, i: usize) -> SoftmaxOutput {
        SoftmaxOutput {
            probs: self.probs.row(i).to_owned(),
            cache: self.activations.iter().map(|a| a.row(i).to_owned()).collect(),
        }
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Forward pass over a minibatch (`batch x input_dim`).
pub fn forward_batch(params: &ClassifierParams, x: ArrayView2<f64>) -> Result<BatchForward> {
    if x.ncols() != params.input_dim() {
        return Err(NnetError::DimensionMismatch { expected: params.input_dim(), got: x.ncols() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NnetError::NonFiniteInput);
    }
    let last = params.num_layers() - 1;
    let mut activations = Vec::with_capacity(params.num_layers());
    let mut current = x.to_owned();
    for l in 0..params.num_layers() {
        let mut z = current.dot(&params.weights[l]);
        z += &params.biases[l];
        activations.push(current);
        if l == last {
            softmax_rows(&mut z);
        } else {
            z.mapv_inplace(|v| v.max(0.0));
        }
        current = z;
    }
    Ok(BatchForward { probs: current, activations })
}

pub fn forward(params: &ClassifierParams, x: ArrayView1<f64>) -> Result<SoftmaxOutput> {
    let batch = x.insert_axis(Axis(0));
    Ok(forward_batch(params, batch)?.sample(0))
}

/// Returns the class index of a one-hot target vector.
pub fn one_hot_class(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(NnetError::NotOneHot);
            }
            hot = Some(k);
        } else if v != 0.0 {
            return Err(NnetError::NotOneHot);
        }
    }
    hot.ok_or(NnetError::NotOneHot)
}

/// Per-sample cross-entropy `-ln max(p_label, 1e-12)`.
pub fn ce_loss(probs: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(NnetError::LabelOutOfRange { label, classes: probs.len() });
    }
    Ok(-probs[label].max(LOG_CLAMP).ln())
}

/// Per-sample CE for every row of a batch.
pub fn ce_losses(probs: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != probs.nrows() {
        return Err(NnetError::DimensionMismatch { expected: probs.nrows(), got: labels.len() });
    }
    probs.rows().into_iter().zip(labels).map(|(row, &y)| ce_loss(row, y)).collect()
}

/// Gradients of the objective with respect to both networks' logits.
///
/// `ce_coef1`/`ce_coef2` multiply each network's per-sample CE term. The
/// consistency term is skipped entirely when `lambda == 0`, so the CE path is
/// bit-identical to a single-network computation.
pub fn logit_grads_pair(
    probs1: ArrayView2<f64>,
    probs2: ArrayView2<f64>,
    labels: &[usize],
    ce_coef1: &[f64],
    ce_coef2: &[f64],
    lambda: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(NnetError::InvalidLambda(lambda));
    }
    if probs1.dim() != probs2.dim() {
        return Err(NnetError::ShapeMismatch(format!(
            "network outputs {:?} vs {:?}",
            probs1.dim(),
            probs2.dim()
        )));
    }
    let (_, classes) = probs1.dim();
    let mut d1 = logit_grads_ce(probs1, labels, ce_coef1)?;
    let mut d2 = logit_grads_ce(probs2, labels, ce_coef2)?;
    if lambda > 0.0 {
        let batch = probs1.nrows() as f64;
        let scale = 2.0 * lambda / (classes as f64 * batch);
        for i in 0..probs1.nrows() {
            let (f1, f2) = (probs1.row(i), probs2.row(i));
            let g: Array1<f64> = (&f1 - &f2) * scale;
            let g1_dot = g.dot(&f1);
            let g2_dot = -g.dot(&f2);
            for k in 0..classes {
                d1[[i, k]] += f1[k] * (g[k] - g1_dot);
                d2[[i, k]] += f2[k] * (-g[k] - g2_dot);
            }
        }
    }
    Ok((d1, d2))
}

/// Logit gradient of `mean_i(coef_i * CE_i)` for one network.
pub fn logit_grads_ce(probs: ArrayView2<f64>, labels: &[usize], ce_coef: &[f64]) -> Result<Array2<f64>> {
    let (batch, classes) = probs.dim();
    if labels.len() != batch || ce_coef.len() != batch {
        return Err(NnetError::ShapeMismatch(format!(
            "batch {batch}, {} labels, {} weights",
            labels.len(),
            ce_coef.len()
        )));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut d = probs.to_owned();
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        let y = labels[i];
        if y >= classes {
            return Err(NnetError::LabelOutOfRange { label: y, classes });
        }
        row[y] -= 1.0;
        let c = ce_coef[i] * inv_batch;
        row.mapv_inplace(|v| v * c);
    }
    Ok(d)
}

/// Backpropagates a logit gradient through the network.
pub fn backward_from_logits(
    params: &ClassifierParams,
    forward: &BatchForward,
    dlogits: Array2<f64>,
) -> Result<Gradients> {
    if dlogits.dim() != forward.probs.dim() || forward.activations.len() != params.num_layers() {
        return Err(NnetError::ShapeMismatch("forward cache does not match network".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut delta = dlogits;
    for l in (0..params.num_layers()).rev() {
        let input = &forward.activations[l];
        grads.weights[l] = input.t().dot(&delta);
        grads.biases[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut upstream = delta.dot(&params.weights[l].t());
            // ReLU mask: activations[l] is the post-ReLU output of layer l - 1.
            Zip::from(&mut upstream).and(input).for_each(|u, &a| {
                if a <= 0.0 {
                    *u = 0.0;
                }
            });
            delta = upstream;
        }
    }
    Ok(grads)
}

/// A network's parameters paired with its forward cache on the current batch.
#[derive(Clone, Copy)]
pub struct NetState<'a> {
    pub params: &'a ClassifierParams,
    pub forward: &'a BatchForward,
}

/// Gradients of `L_wc + lambda * L_co` where net 1's CE is scaled by `w2` and
/// net 2's CE by `w1` (weight exchange). Weights are constants.
pub fn backward_joint(
    net1: NetState<'_>,
    net2: NetState<'_>,
    labels: &[usize],
    w1: &[f64],
    w2: &[f64],
    lambda: f64,
) -> Result<(Gradients, Gradients)> {
    backward_pair(net1, net2, labels, w2, w1, lambda)
}

/// Like [`backward_joint`] but with explicit CE coefficients per network.
pub fn backward_pair(
    net1: NetState<'_>,
    net2: NetState<'_>,
    labels: &[usize],
    ce_coef1: &[f64],
    ce_coef2: &[f64],
    lambda: f64,
) -> Result<(Gradients, Gradients)> {
    let (d1, d2) = logit_grads_pair(
        net1.forward.probs.view(),
        net2.forward.probs.view(),
        labels,
        ce_coef1,
        ce_coef2,
        lambda,
    )?;
    let g1 = backward_from_logits(net1.params, net1.forward, d1)?;
    let g2 = backward_from_logits(net2.params, net2.forward, d2)?;
    Ok((g1, g2))
}

/// Adam state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub const DEFAULT_LR: f64 = 2e-4;

    pub fn new(params: &ClassifierParams, lr: f64) -> Self {
        Self {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update, in place. Parameters are untouched on error.
pub fn adam_step(params: &mut ClassifierParams, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if !grads.same_shape(params) || !opt.first_moment.same_shape(params) {
        return Err(NnetError::ShapeMismatch("gradient/optimizer shapes differ from parameters".into()));
    }
    if !grads.is_finite() {
        return Err(NnetError::NonFiniteGradient);
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let (b1, b2, lr, eps) = (opt.beta1, opt.beta2, opt.lr, opt.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..params.num_layers() {
        Zip::from(&mut params.weights[l])
            .and(&grads.weights[l])
            .and(&mut opt.first_moment.weights[l])
            .and(&mut opt.second_moment.weights[l])
            .for_each(update);
        Zip::from(&mut params.biases[l])
            .and(&grads.biases[l])
            .and(&mut opt.first_moment.biases[l])
            .and(&mut opt.second_moment.biases[l])
            .for_each(update);
    }
    Ok(())
}

/// Minibatch used by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

fn joint_objective(
    net1: &ClassifierParams,
    net2: &ClassifierParams,
    batch: &GradCheckBatch,
    lambda: f64,
) -> Result<f64> {
    use crate::cotrain::{consistency_loss, joint_loss, weighted_ce};
    let f1 = forward_batch(net1, batch.features.view())?;
    let f2 = forward_batch(net2, batch.features.view())?;
    let l1 = ce_losses(f1.probs.view(), &batch.labels)?;
    let l2 = ce_losses(f2.probs.view(), &batch.labels)?;
    let wc = weighted_ce(&l1, &l2, &batch.w1, &batch.w2).map_err(|e| NnetError::ShapeMismatch(e.to_string()))?;
    let co = consistency_loss(f1.probs.view(), f2.probs.view())
        .map_err(|e| NnetError::ShapeMismatch(e.to_string()))?;
    Ok(joint_loss(wc, co, lambda))
}

/// Max relative error between [`backward_joint`] and central finite
/// differences over every parameter of both networks.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// near-zero entries from amplifying rounding noise.
pub fn grad_check(
    net1: &ClassifierParams,
    net2: &ClassifierParams,
    batch: &GradCheckBatch,
    lambda: f64,
    step: f64,
) -> Result<f64> {
    let f1 = forward_batch(net1, batch.features.view())?;
    let f2 = forward_batch(net2, batch.features.view())?;
    let (g1, g2) = backward_joint(
        NetState { params: net1, forward: &f1 },
        NetState { params: net2, forward: &f2 },
        &batch.labels,
        &batch.w1,
        &batch.w2,
        lambda,
    )?;
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0usize, g1.flatten()), (1, g2.flatten())] {
        for (idx, &a) in analytic.iter().enumerate() {
            let mut plus = if which == 0 { net1.clone() } else { net2.clone() };
            let mut minus = plus.clone();
            *plus.param_mut(idx) += step;
            *minus.param_mut(idx) -= step;
            let (lp, lm) = if which == 0 {
                (joint_objective(&plus, net2, batch, lambda)?, joint_objective(&minus, net2, batch, lambda)?)
            } else {
                (joint_objective(net1, &plus, batch, lambda)?, joint_objective(net1, &minus, batch, lambda)?)
            };
            let numeric = (lp - lm) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
