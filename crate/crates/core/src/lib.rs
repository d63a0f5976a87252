//! Multi-label weather recognition with masked training: image
//! augmentation, label-state masking, a truncated residual backbone feeding
//! a Transformer encoder array, training/evaluation, and a frame-streaming
//! inference benchmark.

pub mod augment;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod nn;
pub mod train;

pub use error::{Result, WxError};
