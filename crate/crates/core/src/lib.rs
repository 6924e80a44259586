//! Per-cell differentiable architecture search for multi-channel time series.
//!
//! The crate covers a reverse-mode autodiff tape over 1-D tensors, a cell-based
//! supernet whose cells each own their operation logits and input gates, the
//! alternating search loop, derivation and retraining of the discrete network,
//! and a verification protocol (EER, FRR at fixed FAR, DET curves).

pub mod cell;
pub mod checkpoint;
pub mod data;
pub mod discrete;
pub mod error;
pub mod genotype;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod supernet;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
