//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every op records its inputs so that
//! [`Tape::backward`] can populate gradients in one reverse sweep. The op set
//! is the one needed by attention models at desk scale: matrix products,
//! elementwise arithmetic, softmax, layer norm, row gathering and a fused
//! multi-head attention kernel.

mod attention;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use attention::MASK_PENALTY;
pub use error::{Result, TensorError};
pub use rng::Rng;
pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;
