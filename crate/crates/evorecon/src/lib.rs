//! Evolutionary search over convolutional encoder-decoder reconstruction
//! networks for undersampled k-space imaging.
//!
//! The crate is organized around the search pipeline:
//!
//! - [`genome`]: the 12-gene architecture encoding and its operators.
//! - [`phenotype`]: deterministic compilation of a genome into a validated
//!   architecture graph with inferred shapes.
//! - [`analyzer`]: static FLOP/parameter accounting for compiled graphs.
//! - [`tensor`] / [`autodiff`]: a small dense NHWC tensor engine with
//!   reverse-mode differentiation covering exactly the node kinds the
//!   compiler emits.
//! - [`trainer`]: gradient-descent training with the gene-selected optimizer,
//!   early stopping, and fitness assignment.
//! - [`kspace`]: the acquisition/degradation simulation (FFT, row
//!   undersampling masks, zero-filling, aliased/ground-truth pair
//!   construction) plus synthetic phantom generation.
//! - [`metrics`]: MSE / NMSE / SSIM / PSNR image-quality metrics.
//! - [`search`]: the genetic-algorithm orchestrator with lineage logging and
//!   checkpoint/resume.

pub mod analyzer;
pub mod autodiff;
pub mod etns;
pub mod genome;
pub mod image;
pub mod kspace;
pub mod metrics;
pub mod phenotype;
pub mod search;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use genome::{Genome, KernelSet, OptimizerKind};
pub use image::Image;
pub use phenotype::{ArchGraph, NodeKind, NodeSpec, TensorShape};
