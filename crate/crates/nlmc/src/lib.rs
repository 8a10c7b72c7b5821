//! Scalable Bayesian non-linear matrix completion on large, sparse
//! multi-view matrices.
//!
//! The model is a variational Bayesian GP-LVM shared across data views
//! (MRD). Training runs in two stages with restricted communication: one
//! dense block is fitted first, then the remaining blocks are fitted in
//! parallel against a snapshot of the first, each penalized by a KL term
//! toward the snapshot posterior. Prediction aggregates per-block experts
//! with a product of experts, a corrected product that divides out the
//! shared block, or intermediate aggregation of submodels followed by the
//! ordinary product.

pub mod error;
pub mod util;

pub mod kernels;

pub mod data;

pub mod vgplvm;

pub mod coupling;

pub mod predict;

pub mod runtime;

pub mod eval;

pub use error::{NlmcError, Result};
