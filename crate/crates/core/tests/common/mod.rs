#![allow(dead_code)]

use ndarray::Axis;
use resup::cotrain::{accuracy, batch_order, network_seeds, TrainConfig, Variant};
use resup::datagen::Dataset;
use resup::harness::{DataSpec, ExperimentSpec, NoiseMode, NoiseSpec};
use resup::nnet::{
    adam_step, backward_from_logits, forward_batch, init_classifier, logit_grads_ce, ClassifierParams, OptimizerState,
};

/// Two networks trained with plain cross-entropy, each on its own, using only
/// the nnet primitives and the same init seeds and batch order as `run_training`.
pub struct IndependentRun {
    pub nets: [ClassifierParams; 2],
    /// Test accuracy of each network after every epoch.
    pub accuracies: Vec<[f64; 2]>,
}

pub fn independent_ce_training(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> IndependentRun {
    let dims = cfg.layer_dims(train.dim(), train.class_count);
    let (s1, s2) = network_seeds(cfg);
    let mut nets = [init_classifier(&dims, s1).unwrap(), init_classifier(&dims, s2).unwrap()];
    let mut opts = [OptimizerState::new(&nets[0], cfg.lr), OptimizerState::new(&nets[1], cfg.lr)];
    let mut accuracies = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = batch_order(cfg.seed, epoch, train.len());
        for (net, opt) in nets.iter_mut().zip(opts.iter_mut()) {
            opt.lr = cfg.lr_at(epoch);
            for idx in order.chunks(cfg.batch_size) {
                let x = train.features.select(Axis(0), idx);
                let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let out = forward_batch(net, x.view()).unwrap();
                let d = logit_grads_ce(out.probs.view(), &labels, &vec![1.0; idx.len()]).unwrap();
                let g = backward_from_logits(net, &out, d).unwrap();
                adam_step(net, &g, opt).unwrap();
            }
        }
        accuracies.push([accuracy(&nets[0], test).unwrap(), accuracy(&nets[1], test).unwrap()]);
    }
    IndependentRun { nets, accuracies }
}

/// The desk-scale noisy-label benchmark: 4 Gaussian blobs in 10 dimensions.
pub fn blobs_benchmark(rate: f64, variants: Vec<Variant>) -> ExperimentSpec {
    ExperimentSpec {
        data: DataSpec::Blobs { n_train: 2000, n_test: 500, classes: 4, dim: 10, separation: 4.0, seed: 100 },
        noise: NoiseSpec { mode: NoiseMode::Sym, rate, seed: 200 },
        train: TrainConfig {
            epochs: 60,
            lr: 1e-3,
            lr_milestones: vec![],
            hidden_dims: vec![128, 128],
            ..TrainConfig::default()
        },
        variants,
        seeds: (0..5).collect(),
        omit_histograms: true,
    }
}
