//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! The engine is generic over the element type through [`Scalar`]; models
//! train in `f32` and are gradient-checked in `f64`.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{log_sum_exp, softmax_rows, Graph, Var};
pub use optim::Adam;
pub use params::{Grads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{matmul, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
