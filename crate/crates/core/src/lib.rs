//! Token-level hallucination probes over frozen transformer hidden states.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`dataset`]: probing datasets (hidden states, span annotations, token
//!   labels, optional NLL and token-distribution payloads), a deterministic
//!   synthetic generator with a layer-dependent separability profile, and a
//!   binary-blob + JSON-manifest file format.
//! * [`probe`]: linear and small MLP probes with exact analytic gradients.
//! * [`loss`]: the multi-objective training loss (focal + span + sparsity +
//!   distribution-shift terms) with high-loss span masking.
//! * [`trainer`]: seeded SGD/Adam training with validation-based selection.
//! * [`metrics`]: ROC-AUC, recall at fixed FPR, confusion counts, and
//!   entropy/perplexity baselines.
//! * [`layer_model`]: per-layer class separability, a parametric layer
//!   performance model, and the normalized utility used to rank layers.
//! * [`bayesopt`]: GP-based Bayesian search over layers (EI/UCB) with regret
//!   bookkeeping against a known oracle.
//!
//! Everything is deterministic given the seeds carried in the config types;
//! random draws go through named sub-streams (see [`rng`]).

pub mod bayesopt;
pub mod dataset;
pub mod error;
pub mod layer_model;
pub mod loss;
pub mod metrics;
pub mod num;
pub mod probe;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
