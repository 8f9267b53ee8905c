//! Reverse-mode differentiation over small dense tensors.
//!
//! Every operation produces a new [`Tensor`]; when any input requires
//! gradients the result remembers the operation and its inputs, and
//! [`Tensor::backward`] walks that record once to produce a
//! [`GradientMap`] for the leaves.

mod backward;
mod error;
mod kernels;
mod ops;
mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use backward::{GradientMap, LeafGrad};
pub use error::{Result, TensorError};
pub use tensor::{DType, Tensor, TensorId};
