//! Reverse-mode differentiation engine and optimizer.

mod optim;
mod tensor;

pub use optim::{clip_grad_norm, clip_grad_value, clip_weights, grad_norm, zero_grads, Adam, Param};
pub use tensor::Tensor;
