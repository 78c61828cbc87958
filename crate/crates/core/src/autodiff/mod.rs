//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod ops;
mod tape;

pub use ops::concat;
pub use tape::{Gradients, Tape, Var};
