//! Multi-modal sleep staging from sets of physiological signals.
//!
//! The pipeline has three learned stages. Each signal kind (ECG, PPG and the
//! two respiratory effort belts) is turned into a per-epoch feature sequence
//! by its own residual CNN. For every 30-second epoch the available features
//! are fused by a small transformer encoder that reads out a CLS token, and a
//! dilated CNN mixes the fused sequence over the night to produce four-class
//! stage logits (Wake, Light, Deep, REM).
//!
//! Everything runs on the reverse-mode autodiff tape in [`tensor`], so the
//! same code path trains in `f32` and is gradient-checked in `f64`.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod blob;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
