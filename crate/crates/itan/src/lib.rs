//! Streaming outlier detection built from two coupled online learners: an
//! incremental tree of Gaussian density estimators whose mixture tracks a
//! multi-modal source, and an adaptive threshold on the estimated density
//! that converts scores into anomaly decisions round by round.
//!
//! The crate also ships the reference baselines (single-Gaussian ML,
//! windowed KDE, windowed GMM), synthetic stream generators, a detector
//! pipeline, and an evaluation harness producing loss curves and ROC/AUC
//! summaries.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod exp_family;
pub mod idt;
pub mod mixture;
pub mod pipeline;
pub mod threshold;

pub use error::{Error, Result};
