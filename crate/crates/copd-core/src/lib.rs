//! Differentiable core and model for dual-domain graph recommendation.
//!
//! The crate is `no_std` (alloc only) and fully deterministic given a seed.
//! It carries the numeric kernel (tape autodiff + Adam), dataset building and
//! sampling, normalized bipartite graphs, the two-domain recommendation model
//! with coherence-aligned shared item attributes and popularity-weighted
//! preference disentanglement, its losses, the training loop, ranking
//! evaluation, and a synthetic data generator. All file and terminal IO lives
//! in the companion `copd` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{CoreError, Result};
pub use matrix::Matrix;
pub use tape::{Tape, TensorId};
