//! Visualizing and quantifying the discrimination power of DNN features.
//!
//! Features are modeled with a revised von Mises-Fisher distribution whose
//! concentration grows with feature strength. On top of that model the crate
//! learns low-dimensional projections of sample features and regional
//! features, estimates region and channel importance, counts knowledge points,
//! and computes comparison metrics for adversarial attacks and distillation.
//!
//! Module map:
//!
//! - [`numutil`]: special functions, log-space helpers, samplers, gradient checks
//! - [`vmf`]: vMF density, concentration MLE, the κ(l) table
//! - [`mixture`]: vMF mixture posterior and EM
//! - [`sample_embed`]: sample projection `g = M f`
//! - [`region_embed`]: region projection `h = Λ f^(r)`
//! - [`importance`]: region/channel importance and the exact Shapley oracle
//! - [`knowledge`]: knowledge points and reliable ratios
//! - [`analysis`]: attack and distillation metrics
//! - [`synth`]: ground-truth synthetic data
//! - [`io`]: tensor container, manifests, JSON exports

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod importance;
pub mod io;
pub mod knowledge;
pub mod linalg;
pub mod mixture;
pub mod numutil;
pub mod region_embed;
pub mod sample_embed;
pub mod synth;
pub mod vmf;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use numutil::RngState;
