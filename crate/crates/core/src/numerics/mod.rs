//! Deterministic tensor arithmetic with reverse-mode derivatives for the
//! layer primitives the networks are built from.

pub mod gradcheck;
pub mod graph;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{BoundParams, Grads, Graph, Var};
pub use ops::{Direction, NumericMode};
pub use tensor::Tensor;
