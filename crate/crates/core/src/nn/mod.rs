//! Minimal CPU training stack: dense 5D tensors, convolution, batch normalization,
//! pooling, resampling, losses and optimizers, each with a hand-written backward pass.

pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod real;
pub mod resample;
pub mod tensor;

pub use conv::Conv3d;
pub use norm::{BatchNorm, Mode};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec, OptimizerState};
pub use param::{Param, ParamGroup, Parameterized};
pub use real::Real;
pub use tensor::Tensor;
