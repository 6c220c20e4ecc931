//! Label-noise-robust classification with similarity-based beta-mixture
//! weighting and two-network co-training.
//!
//! * [`nnet`]: MLP softmax classifier, analytic gradients, Adam.
//! * [`noise_model`]: cosine similarity, beta mixture EM, posterior weights.
//! * [`cotrain`]: weighted CE with weight exchange, consistency loss, epoch loop.
//! * [`datagen`]: Gaussian blobs, label corruption, CSV I/O.
//! * [`harness`]: experiment grids, reports and diagnostics.

pub mod cotrain;
pub mod datagen;
pub mod harness;
pub mod nnet;
pub mod noise_model;
