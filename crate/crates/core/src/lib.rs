pub mod audio;
pub mod autograd;
pub mod container;
pub mod eval;
pub mod features;
pub mod model;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Tensor32 = autograd::Tensor<f32>;
pub type Tensor64 = autograd::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ParamStore32 = autograd::ParamStore<f32>;
pub type ParamStore64 = autograd::ParamStore<f64>;
