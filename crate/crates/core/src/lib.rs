//! Annotation-bias-aware segmentation in plain Rust.
//!
//! This crate holds everything that is pure computation: a small dense
//! tensor type with a reverse-mode tape, the layers and optimiser built on
//! it, the encoder / preference-query transformer / stochastic head model,
//! the synthetic multi-annotator generator, the training step and the Dice
//! based evaluation metrics. It is `no_std` with `alloc`; file formats and
//! the command line live in the `tab` crate.
#![no_std]
#![warn(missing_debug_implementations)]
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
mod error;
pub mod gradcheck;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
mod scalar;
pub mod synth;
mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
