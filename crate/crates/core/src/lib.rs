pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod grid;
pub mod llstm;
pub mod metrics;
pub mod moddrop;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid3, Mask, ProbMap};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
