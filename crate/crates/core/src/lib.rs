pub mod autodiff;
pub mod data;
mod error;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod selfcheck;
pub mod trainer;

pub use autodiff::{AutodiffError, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor<T = f32> = autodiff::Tensor<T>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Model32 = model::CmaeModel<f32>;
pub type Model64 = model::CmaeModel<f64>;
