//! Dense tensors and a reverse-mode autodiff tape, sized for small
//! convolutional graph models on CPU.

pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{gemm, Scalar};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
