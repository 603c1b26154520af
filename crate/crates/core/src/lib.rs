//! Federated graph learning at desk scale, plus the gradient-leakage attack
//! that motivates studying it.
//!
//! The crate simulates graph-classification federations in-process: clients
//! compute GCN gradients on private graphs, optional defenses perturb them,
//! and a server aggregates. Every shared gradient is recorded so an attacker
//! can try to reconstruct the private graphs (node features and adjacency)
//! offline. Reconstruction quality is scored with the usual feature/structure
//! metrics.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`graph`]: graph data model, TU-format ingestion, non-i.i.d. partitioning,
//!   synthetic graph generation
//! - [`linalg`]: dense matrices and the minimum-norm least-squares solver
//! - [`nn`]: the GCN classifier, analytic forward/backward passes
//! - [`opt`]: Adam, used to train the attack's structure decoder
//! - [`fed`]: the federation round loop, defenses, round transcripts
//! - [`attack`]: embedding extraction, structure decoding, feature recovery
//! - [`metrics`]: MSE / ACC / AUC / AP / edge accuracy
//! - [`checkpoint`]: exact (bit-preserving) serialization of all artifacts

pub mod attack;
pub mod checkpoint;
pub mod error;
pub mod fed;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
