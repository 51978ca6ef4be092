pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod graph;
pub mod models;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, the type every pipeline stage works in.
pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Network = models::Network<f64>;
pub type Network32 = models::Network<f32>;
