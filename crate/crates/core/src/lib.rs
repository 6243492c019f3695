//! Transformer-based semantic filter (tSF) and the PatchProto few-shot
//! classification framework, built on a small reverse-mode autodiff engine.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, threading and
//! the command-line tool live in the companion `tsf` crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors, the gradient
//!   tape and the finite-difference checker.
//! - [`attention`]: every `{Q, K, V}` wiring used as a neck, plus exact
//!   parameter and multiply-accumulate counters.
//! - [`data`]: synthetic base/val/novel datasets, episode sampling, query
//!   rotation and confidence-interval statistics.
//! - [`patchproto`]: backbone, metric/global/rotation heads, the multi-task
//!   loss, training and inductive inference.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod patchproto;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
