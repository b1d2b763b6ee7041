//! Convolutional body-part detector with a trainable convolutional spatial
//! model, built from scratch on a dense f64 tensor type.
//!
//! The pipeline: a multi-resolution ConvNet produces per-joint heat-maps; a
//! single-round convolutional message-passing network sharpens them using
//! learned pairwise spatial priors; both are trained with hand-derived
//! backpropagation and Nesterov SGD, separately and then end to end.
//! Synthetic articulated-skeleton scenes stand in for real pose datasets.

pub mod conv;
pub mod data;
pub mod detector;
pub mod error;
mod fft;
pub mod eval;
pub mod model_io;
pub mod nn;
pub mod rng;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
