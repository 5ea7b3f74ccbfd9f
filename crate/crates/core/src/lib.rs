//! Self-supervised training engine for spiking neural networks.
//!
//! The crate is organized around a minimal reverse-mode autodiff tape
//! ([`tape`]) on dense tensors ([`tensor`]), dual-path spiking neuron
//! dynamics ([`neuron`]), composable spiking backbones with a non-spiking
//! projection head ([`network`]), temporal cross-correlation objectives
//! ([`loss`]), the dual-path training loop ([`trainer`]), a small binary
//! tensor container plus synthetic datasets ([`dataio`]), and post-hoc
//! diagnostics such as linear probing, spike statistics, and event-driven
//! energy estimates ([`analysis`]). The [`cli`] module drives everything
//! from a flat config file.

pub mod analysis;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod loss;
pub mod network;
pub mod neuron;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{finite_difference_gradient, GradientMap, ParamMap, Tape, Var};
pub use tensor::{Precision, Tensor};
