//! Concept-conditioned relevance propagation for small grid detectors.
//!
//! The crate is `no_std` with `alloc`. It holds the tensor kernels, the layer
//! graph with tracing and training, the LRP backward pass, linear concept
//! encoders, concept projection, evaluation metrics and a synthetic scene
//! generator. File formats and the command-line tool live in the companion
//! `concept-probe` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attribution;
pub mod concepts;
pub mod data;
pub mod error;
pub mod lrp;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};
