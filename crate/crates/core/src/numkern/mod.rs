//! Minimal dense numeric kernel with reverse-mode differentiation.
//!
//! Single-threaded per tape; distinct tapes may live on different threads.
//! 32-bit precision is the training default, 64-bit the oracle mode.

mod fd;
mod ops;
mod tape;
mod tensor;

pub use fd::finite_diff_grad;
pub use tape::{Tape, Var};
pub use tensor::{l2_norm_f64, Scalar, Tensor};

#[cfg(test)]
mod tests;
