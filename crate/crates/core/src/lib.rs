//! Semi-supervised data programming.
//!
//! A labelling-function (LF) graphical model and a feature classifier are trained
//! jointly under a combination of up to seven loss terms, and a facility-location
//! subset selector recommends which unlabelled instances to send for labelling.
//!
//! Module map:
//! - [`dataset`]: bundles of features, LF firings, labels and splits; JSON / CSV-dir IO.
//! - [`lfmodel`]: the LF generative model `P(l, y)` with exact normalisation and gradients.
//! - [`classifier`]: logistic regression / two-hidden-layer ReLU network, losses, Adam.
//! - [`joint`]: loss combinations, joint training loop, grid search.
//! - [`subsel`]: entropy filtering, facility location, naive and lazy greedy.
//! - [`synth`]: the three-Gaussian synthetic benchmark.
//! - [`eval`]: accuracy, F1 metrics, exact Wilcoxon signed-rank test.
//! - [`report`]: manifests and hashing for reproducible CLI runs.

pub mod classifier;
pub mod dataset;
pub mod eval;
pub mod joint;
pub mod lfmodel;
pub mod report;
pub mod rng;
pub mod subsel;
pub mod synth;

pub(crate) mod numeric;

pub use classifier::{AdamState, Architecture, ClassifierParams};
pub use dataset::{DataBundle, DataError, Format, InstanceSet};
pub use joint::{LossCombo, LossTerm, TrainConfig, TrainedModel};
pub use lfmodel::LfModelParams;
