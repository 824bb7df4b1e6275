//! Dense tensors, convolution kernels and reverse-mode differentiation.

pub mod bilinear;
pub mod conv;
pub mod deform;
pub mod gradcheck;
pub mod norm;
mod real;
pub mod softmax;
pub mod tape;
mod tensor;

pub use real::{gemm, Real};
pub use tensor::Tensor;
