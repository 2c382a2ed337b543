//! Dense tensors and the reverse-mode gradient tape.

pub(crate) mod dense;
mod tape;

pub use dense::{broadcast_shape, ElementwiseOp, ReduceOp, Tensor};
pub use tape::{Gradients, Graph, Var};
