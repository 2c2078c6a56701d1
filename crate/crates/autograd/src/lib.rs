//! A small reverse-mode automatic differentiation engine over dense
//! row-major tensors, plus the convolutional building blocks used by the
//! classifiers and the image-to-image GAN.
//!
//! Graphs are recorded per forward pass on a [`Tape`]. Trainable values live
//! in a [`ParamStore`] outside the tape; a tape copies parameter values in as
//! leaves and [`ParamStore::accumulate`] adds the gradients back after
//! [`Tape::backward`].
//!
//! Everything is generic over [`Real`] so that training can run in `f32`
//! while gradient checks run the same code in `f64`.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
mod real;
mod store;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params};
pub use optim::{AdamState, SgdState};
pub use real::Real;
pub use store::{EntryKind, ParamId, ParamStore};
pub use tape::{Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;
