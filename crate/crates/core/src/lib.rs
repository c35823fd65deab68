//! Desk-scale PixelSNAIL: an autoregressive image density model that
//! interleaves causal convolutions with causal self-attention and emits a
//! discretized mixture of logistics per pixel.

pub mod cli;
pub mod data;
pub mod layers;
pub mod likelihood;
pub mod model;
pub mod sampling;
pub mod tensor;
pub mod train;
