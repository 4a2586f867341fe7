//! Dense tensors with tape-based reverse-mode differentiation.

pub mod check;
mod ops;
mod tape;
mod tensor;

pub use ops::softmax_last;
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::{matmul, Real, Tensor};
pub(crate) use tensor::{gemm_acc, gemm_nt_acc};
