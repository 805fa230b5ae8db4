//! Self-supervised condition adaptation for frozen vision tasks.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece of
//! the pipeline:
//!
//! - [`tape`], [`kernels`], [`optim`], [`params`]: a small reverse-mode
//!   autodiff engine with the convolution, normalization and loss operators the
//!   models need, plus Adam.
//! - [`world`]: a procedural street world with exact masks, place ids and
//!   closed-form photometric conditions.
//! - [`gan`]: least-squares cycle-consistent translation between the reference
//!   condition and one target condition.
//! - [`tasks`] and [`metrics`]: frozen segmentation / place-retrieval networks,
//!   approximated ground truth, mIOU and precision-recall evaluation.
//! - [`adapter`]: encoder-decoder input adapters trained through the frozen
//!   tasks.
//! - [`classifier`]: the condition classifier and its 128-d descriptor.
//! - [`memory`]: the descriptor-addressed parameter memory.
//! - [`orchestrator`]: frame buffer, novelty detection and the online
//!   adaptation episode.
//!
//! IO, file formats and the command line live in the `condadapt` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod classifier;
pub mod config;
mod error;
pub mod gan;
pub mod kernels;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use rng::Rng;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
