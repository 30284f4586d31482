//! Structured pruning laboratory built around incremental group regularization.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`gemm`]: dense NCHW tensors, im2col lowering, deterministic GEMM.
//! - [`nn`]: a small CNN engine with hand-derived backprop, SGD and gradient checking.
//! - [`groups`]: row (filter-wise) and column (shape-wise) weight groups, norms, ranks, masks.
//! - [`scheduler`]: per-group regularization factors driven by time-averaged rankings.
//! - [`compact`] and [`bench`]: physical removal of pruned groups and speedup measurement.
//! - [`theorem`]: numerical checks that a growing L2 factor shrinks a tracked local minimum.
//! - [`data`], [`config`], [`experiment`]: datasets, JSON configs and the prune/retrain pipeline.

pub mod bench;
pub mod compact;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gemm;
pub mod groups;
pub mod nn;
pub mod real;
pub mod scheduler;
pub mod tensor;
pub mod theorem;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor4D;
