//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Everything runs on a Wengert tape: the forward pass records primitive
//! operations, `Tape::backward` replays them once in reverse and accumulates
//! gradients in tape order, which keeps runs bit-deterministic for a fixed
//! build. f32 is the working precision; f64 exists for gradient checks.

mod fd;
mod kernels;
mod tape;
mod tensor;

pub use fd::finite_difference_grad;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use kernels::mm_nn;
