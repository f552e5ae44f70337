//! Dual-path token learning for remote photoplethysmography.
//!
//! The crate covers the whole pipeline from per-ROI facial colour traces to
//! heart-rate estimates:
//!
//! * [`mstmap`] builds multi-scale spatial-temporal maps from ROI traces.
//! * [`autodiff`] is a small dense reverse-mode autodiff tape.
//! * [`model`] holds the spatial/temporal token-learner transformer and the
//!   negative Pearson loss.
//! * [`trainer`] runs seeded Adam training and evaluation.
//! * [`hrdsp`] filters waveforms and turns them into heart rates and metrics.
//! * [`baselines`] contains the classical GREEN, CHROM and POS extractors.
//! * [`synth`] generates deterministic synthetic traces with known ground truth.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod hrdsp;
pub mod io;
pub mod model;
pub mod mstmap;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
