//! Generative iterative learning (GIL) for zero-shot classification in
//! feature space.
//!
//! The crate is `no_std` with `alloc`: it holds the autodiff engine, the
//! networks, the replay memory, the feature-generating GAN, the continual
//! training pipeline and the evaluation metrics. File formats, checkpoints and
//! the command line live in the companion `gil` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod nn;
pub mod pipeline;
pub mod replay;
pub mod rng;
pub mod semantic;
pub mod tensor;

pub use error::{GilError, Result};
pub use tensor::Tensor;
