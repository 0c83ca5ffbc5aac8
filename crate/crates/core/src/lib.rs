//! Presence-only species distribution modeling.
//!
//! A multi-species residual MLP trained from single-positive occurrence
//! records under three losses: binary cross-entropy with target-group
//! background, the full assume-negative loss, and the full weighted loss
//! that rebalances species by inverse presence frequency. Evaluation covers
//! per-species ROC-AUC and average precision with rare-species and
//! frequency-bucketed aggregation, plus geo-prior top-1 gain. A synthetic
//! world generator produces long-tailed data with known ground truth.
//!
//! Runnable walkthroughs live in `examples/`; the `sdm` binary exposes the
//! pipeline as subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
