//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! Operations are recorded on a [`Tape`] as methods; domain modules add their
//! own differentiable operations through [`Tape::push`].

mod basic;
pub mod gradcheck;
mod nn;
mod tape;

pub use basic::sigmoid;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
