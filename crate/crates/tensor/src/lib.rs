//! Dense tensors and a reverse-mode tape, sized for desk-scale transformer
//! experiments. Row-major, explicit shapes, no implicit broadcasting apart
//! from scalar multiplication and the explicit row/column helpers.

mod error;
pub mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{softmax_last, Gradients, Tape, Var};
pub use tensor::Tensor;
