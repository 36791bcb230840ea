//! Dense tensors and reverse-mode differentiation.

mod kernels;
mod ops;
mod tape;
mod tensor;

pub use ops::{matmul, moving_average, softmax};
pub(crate) use kernels::softmax_in_place;
pub(crate) use ops::check_window;
pub use tape::{AttentionGroups, Gradients, RowOp, Tape, Var};
pub use tensor::Tensor;
