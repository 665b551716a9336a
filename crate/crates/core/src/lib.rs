//! Mobility-aware hierarchical federated learning.
//!
//! Vehicles train locally, edge servers average the vehicles they currently
//! cover, and a cloud server averages the edge models. Vehicles move between
//! edges following a Markov chain, which mixes edge-level data over time.
//!
//! * [`model`]: training tasks, gradients and SGD.
//! * [`data`]: synthetic datasets, partitioners and label metrics.
//! * [`mobility`]: transition matrices, ring spectra, vehicle movement, traces.
//! * [`engine`]: the training state machine and the virtual reference models.
//! * [`bounds`]: closed-form convergence quantities and their estimators.
//! * [`experiment`]: configuration, runs, sweeps and metrics files.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod mobility;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
