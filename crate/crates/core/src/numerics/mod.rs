//! Dense tensors, reverse-mode differentiation, and finite-difference checks.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, FdReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{affine, relu, sigmoid, softmax, tanh, Tensor};
pub(crate) use tensor::softmax_slice;
