//! tarpose: video human pose estimation with temporal aggregate-and-restore
//! attention, implemented from scratch on a minimal autodiff tensor core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, forward kernels, reverse-mode
//!   autodiff tape, and a finite-difference gradient oracle.
//! - [`params`]: named parameter storage shared by all network modules.
//! - [`backbone`]: plain ViT encoder and the lightweight heatmap decoder.
//! - [`fusion`]: joint-specific attention masks, joint-centric temporal
//!   aggregation (JTA), and global restoring attention (GRA).
//! - [`model`]: end-to-end forward passes (temporal, single-frame baseline,
//!   ablation fusion variants), the heatmap loss, and an analytical FLOP
//!   estimator for the fusion stage.
//! - [`synth`]: synthetic articulated-skeleton clip generator with ground
//!   truth, occlusion/blur control, augmentation, and seeded benchmarks.
//! - [`train`]: AdamW, LR schedule, PCK evaluation, the training loop, and
//!   the consolidated gradient-check suite.
//! - [`io`]: binary checkpoints, run configuration files, PGM/PPM images,
//!   and CSV emission.

pub mod backbone;
pub mod fusion;
pub mod io;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tensor, TensorError};
