//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable, row-major and NCHW for image data. Every op records
//! a backward closure when any input requires a gradient; [`Tensor::backward`]
//! walks the recorded graph in reverse topological order. Two precisions are
//! supported through [`Element`]: `f32` for training and `f64` for gradient
//! checking against [`finite_diff_grad`].

mod autograd;
mod element;
mod error;
mod gradcheck;
pub mod ops;
pub mod par;
mod param;
mod tensor;

pub use autograd::{finite_diff_at, finite_diff_grad};
pub use element::{gemm, DType, Element, MatRef};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, rel_err, ridders, GradCheck, REL_FLOOR};
pub use ops::conv::{conv_out_size, Conv2dSpec};
pub use ops::elementwise::{softplus, Activation};
pub use ops::norm::BatchStats;
pub use ops::pool::PoolKind;
pub use ops::resize::{resize_taps, ResizeMode};
pub use param::{Buffer, Param, ParamStore};
pub use tensor::{grad_enabled, no_grad, BackwardFn, Tensor};
