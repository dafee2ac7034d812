//! Multi-graph matching through a shared universe of nodes.
//!
//! Every graph is matched to a common index set (the universe) instead of
//! to every other graph, so pairwise matchings `X_ij = U_i U_j^T` are
//! cycle-consistent by construction. The crate provides the numeric pieces
//! (entropic Sinkhorn projection, optimal rounding), graph construction,
//! universe embeddings with HiPPI synchronization, the Taylor-iteration
//! solver for the summed Koopmans-Beckmann objective with its matching
//! loss, brute-force oracles to check all of it on small instances, and a
//! config-driven experiment runner.

pub mod assignment;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod matrix;
pub mod oracle;
pub mod qap;
pub mod sinkhorn;
pub mod universe;

pub use assignment::{discretize, is_partial_permutation, is_universe_matching};
pub use error::{Error, Result};
pub use matrix::{frobenius_inner, DenseMatrix};
pub use sinkhorn::{sinkhorn, Balancing, Projection, SinkhornParams};
