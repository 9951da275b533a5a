//! Deep learning on graphs at desk scale: dense tensors with a
//! tape-based reverse-mode autodiff engine, immutable multigraphs with
//! node/edge/graph-level features, gather/scatter message passing with a
//! fused sparse-matrix path, neural layers built from those pieces, and
//! a small training loop (Adam, mean squared error, mini-batching over
//! disjoint graph unions).
//!
//! Conventions used throughout:
//! - node feature matrices are `[d, n]`, one column per node;
//! - all indices are 0-based; edges are directed source -> target and
//!   aggregation happens at targets over incoming edges;
//! - training runs in `f32`, gradient checking in `f64`.

pub mod check;
pub mod error;
pub mod graph;
pub mod io;
pub mod mp;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{GnnError, Result};
pub use graph::{GnnGraph, TemporalSnapshots};
pub use tensor::{GradientMap, Gradients, Real, ReduceKind, Tape, Tensor};
