//! Token-sparsified vision transformer for occlusion-robust person
//! re-identification.
//!
//! The crate covers a from-scratch tensor/autodiff substrate, the ViT
//! backbone, hierarchical token sparsification, feature-alignment
//! distillation, occlusion augmentation, retrieval evaluation, throughput
//! benchmarking, and the training/IO plumbing the command-line tool uses.

pub mod augment;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod hts;
pub mod numerics;
pub mod par;
pub mod params;
pub mod train;
pub mod vit;
pub mod visualize;

pub use error::{Error, Result};
pub use numerics::{Real, Tape, Tensor, Var};
