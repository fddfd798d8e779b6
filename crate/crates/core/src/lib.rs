//! Differentiable cluster message passing for node classification.
//!
//! Nodes exchange messages with global and per-neighbourhood cluster-nodes.
//! Soft assignments come from entropic optimal transport (Sinkhorn–Knopp
//! scaling) and the embedding updates are the closed-form minimisers of the
//! clustering objective, so every layer is one block-coordinate descent step.

// `!(x > 0.0)` is the NaN-rejecting form used throughout input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dc;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sinkhorn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradientMap, Matrix, RowSegments, SparseMatrix, Tape, Tensor};
