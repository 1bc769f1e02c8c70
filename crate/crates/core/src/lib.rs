//! Multimodal slip detection: stream alignment, MFCC features, fixed
//! convolutional fusion, an autoencoder and NAP scoring of its hidden
//! reconstruction pathway, plus metrics and a scenario simulator.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nap;
pub mod pipeline;
pub mod seed;
pub mod simulator;
pub mod streamsync;

pub use error::{Error, Result};
