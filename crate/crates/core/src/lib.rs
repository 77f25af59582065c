//! Probabilistic forecasting of characteristic 3D human poses.
//!
//! From a single 25-joint pose observation, predict likely future
//! action-defining poses: a small attention network decodes a volumetric
//! probability heatmap (16³ voxels, 10 probability bins) per output joint,
//! pose hypotheses are sampled autoregressively (right finger, then left
//! finger conditioned on it, then the rest of the body), and each hypothesis
//! is refined under bone-length, joint-angle, end-effector, and heatmap
//! consistency terms.
//!
//! The crate is organized along the pipeline:
//!
//! - [`skeleton`]: BODY_25 joint layout, SMPL-X correspondences, bone tree,
//!   body parts, bone lengths and joint angles
//! - [`numeric`]: dense f64 tensors with tape-based reverse-mode gradients
//!   for the handful of layers the model needs
//! - [`heatmap`]: volumetric probability grids, Gaussian targets, bin
//!   discretization, non-maximum suppression, voxel sampling
//! - [`model`]: encoder / scaled dot-product attention / 3D deconvolution
//!   decoder, plus the deterministic-offset and scalar-regression heads
//! - [`train`]: losses, class weights, Adam with linear warmup, the
//!   teacher-forced three-stage training loop
//! - [`sampler`]: autoregressive assembly of k pose hypotheses
//! - [`refine`]: first-order minimization of the pose-consistency objective
//! - [`eval`]: MPJPE, min-of-k, threshold percentages, NLL, baselines
//! - [`data`]: JSONL dataset records, actor splits, synthetic generator

pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod model;
pub mod numeric;
pub mod refine;
pub mod rng;
pub mod sampler;
pub mod skeleton;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
