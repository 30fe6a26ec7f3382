pub mod binio;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod metric;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use encoders::{Component, Dims, ModelParams, Network};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
