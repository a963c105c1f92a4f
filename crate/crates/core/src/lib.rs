//! Variable-rate learned image codec.
//!
//! A GDN-based convolutional encoder maps an RGB image to a low-resolution
//! code map. Each code-map channel is quantized with a scalable uniform
//! quantizer whose bit depth is chosen at encode time, then coded losslessly.
//! A GDN-based decoder reconstructs the image from the dequantized code map,
//! and an optional enhancement layer carries the lossy-coded residual between
//! the input and that reconstruction.

pub mod bitstream;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod gdn;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod quantizer;
pub mod residual;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
