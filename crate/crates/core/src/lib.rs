//! Graph-based vulnerability detection for C/C++ functions.
//!
//! The pipeline turns code property graph exports into classified
//! functions:
//!
//! - [`cpg`]: canonical CPG documents, corpus files, hygiene passes
//!   (node-count filtering, fragment pruning, hash deduplication).
//! - [`featurize`]: node feature construction from a type vocabulary
//!   and a pluggable content-embedding provider.
//! - [`tape`]: a small reverse-mode autodiff tape over `f64` matrices;
//!   every trainable path in the crate is expressed in its ops so
//!   analytic gradients stay finite-difference exact.
//! - [`ggnn`]: gated message passing over typed edges and the
//!   convolution/pooling readout that scores a graph.
//! - [`okd`]: online knowledge distillation between peer students via
//!   kernel-based local structures and cross-layer KL alignment.
//! - [`train`]: the joint trainer, checkpoints, and prediction,
//!   including the interpolated sequence/graph decision.
//! - [`metrics`]: binary classification metrics and per-CWE tables.
//! - [`synthetic`]: deterministic planted-motif corpora used by the
//!   test suites and quick-start demos.

pub mod cpg;
pub mod featurize;
pub mod ggnn;
pub mod metrics;
pub mod okd;
pub mod synthetic;
pub mod tape;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

mod error;

pub use error::{Error, Result};
