//! Desk-scale one-stage object detector built around two feature blocks:
//! a convolution/channel-attention fusion block and a rectangular
//! calibration block, plus the data, training and evaluation pipeline
//! around them.

pub mod autograd;
pub mod cafm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rcm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
