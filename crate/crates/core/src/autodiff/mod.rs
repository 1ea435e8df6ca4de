//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] evaluates each [`Primitive`] eagerly and records it; calling
//! [`Tape::backward`] on a rank-0 node sweeps the record in reverse and
//! returns every adjoint. Only scalar-with-array broadcasting is implicit.

mod array;
mod check;
mod kernels;
mod tape;

pub use array::Array;
pub use check::grad_check;
pub use tape::{Gradients, NodeId, Primitive, Tape};

pub(crate) use tape::sigmoid;
