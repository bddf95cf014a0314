pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoise;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
