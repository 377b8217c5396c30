//! Causal spatiotemporal encoding of retinal ganglion cell responses to video.
//!
//! The crate bundles a small tensor engine with reverse-mode differentiation,
//! the encoding network and its composite training loss, spike-train metrics,
//! receptive-field estimation, a synthetic retina for ground-truth data, and
//! the training and experiment drivers.

pub mod autograd;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kv;
pub mod loss;
pub mod model;
pub mod prior;
pub mod rf;
pub mod signals;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
