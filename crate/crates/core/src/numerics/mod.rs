//! Minimal differentiable-operation layer with a finite-difference oracle.

mod gradcheck;
pub mod kernels;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error};
pub use ops::{
    binary, binary_backward, conv2d, conv2d_backward, matmul, matmul_backward, softmax,
    softmax_backward, unary, unary_backward, Binary, Unary,
};
pub use tensor::{Parameters, Tensor};
