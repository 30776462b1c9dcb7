//! Benchmarking toolkit for gender debiasing of multi-label emotion
//! classifiers trained on frozen, precomputed features.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: samples with distributional labels and gender tags,
//!   dominance filtering, ratio amplification, downsampling, reweighting and
//!   a synthetic generator.
//! - [`compute`]: a small dense reverse-mode differentiation engine.
//! - [`model`]: the aggregation + two-layer emotion head and the auxiliary
//!   heads used by the debiasing strategies.
//! - [`losses`]: every training objective.
//! - [`metrics`]: Hamming accuracy, macro-F1, equalized-odds and demographic
//!   parity gaps.
//! - [`trainers`]: one driver per method family.
//! - [`harness`]: ratio/method/seed sweeps and report emission.

pub mod compute;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod trainers;

pub use error::{Error, Result};
