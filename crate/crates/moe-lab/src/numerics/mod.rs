//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Everything here is deterministic: fixed reduction orders, no
//! order-changing parallelism, no global state. See `graph` for the op set
//! and `gradcheck` for the finite-difference harness.

pub mod gradcheck;
pub mod graph;
pub mod kernel;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use scalar::{Precision, Scalar};
pub use tensor::{ParamId, ParamSet, ParamStore, Parameter, Tensor};

#[cfg(test)]
mod tests;
