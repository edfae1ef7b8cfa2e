//! Evolving-attention transformer library.
//!
//! The crate is organized bottom-up:
//! * [`tensor`], [`tape`] — dense tensors and reverse-mode autodiff;
//! * [`attention`], [`evolve`] — attention maps and their convolutional
//!   evolution across layers;
//! * [`blocks`], [`model`] — transformer blocks and the three model kinds
//!   (sequence classifier, seq2seq, image classifier);
//! * [`train`] — optimizers, toy tasks, gradient checking, the training loop;
//! * [`io`], [`costs`], [`config`] — checkpoints, attention-map export,
//!   FLOP/parameter accounting, and run configuration.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the unparameterized defaults compute in `f64`.

// Test oracles spell out index arithmetic as `(row * n + col) * heads + h`
// even when a factor is 0 or 1, so every lookup reads the same way.
#![cfg_attr(test, allow(clippy::erasing_op, clippy::identity_op))]

pub mod attention;
pub mod blocks;
pub mod config;
pub mod costs;
pub mod error;
pub mod evolve;
pub mod io;
pub mod model;
pub mod reference;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{BoolMat, Tensor};

/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor (the default compute type).
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = tape::Tape<f32>;
/// Double-precision tape.
pub type Tape64 = tape::Tape<f64>;
