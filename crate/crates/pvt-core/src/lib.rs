//! Convolution-free pyramid vision transformer, self-contained.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — dense row-major `f32`/`f64` tensors and their operations;
//! * [`tape`] — reverse-mode autodiff over those operations, with
//!   instrumentation counters;
//! * [`gradcheck`] — finite-difference verification of tape gradients;
//! * [`init`] — truncated-normal weight initialization;
//! * [`attention`] — multi-head attention with spatial reduction.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod gradcheck;
pub mod heads;
pub mod init;
pub mod tape;
pub mod train;
pub mod tensor;
