//! A desk-scale laboratory for lifelong pretraining of sparse
//! mixture-of-experts (MoE) language models.
//!
//! The crate trains a small decoder-only transformer — in which every other
//! feed-forward block is a sparsely activated top-2 MoE layer — on a stream
//! of synthetic data distributions, and measures how much each lifelong
//! training strategy forgets. The strategies on offer:
//!
//! * progressive expert expansion with warm-started experts and gating rows,
//!   old experts/gatings frozen, and output-level distillation against the
//!   previous phase's model;
//! * naive sequential pretraining;
//! * an online L2 anchor toward the previous phase's weights;
//! * memory replay mixing a fixed fraction of historic data into new phases;
//! * joint (oracle) training on the mixture of all distributions.
//!
//! Everything is deterministic: identical configs and seeds produce
//! byte-identical metrics and reports. See the `book/` guide for a tour.

// pub mod checkpoint;
// pub mod config;
// pub mod data;
pub mod error;
// pub mod evalkit;
// pub mod guide;
// pub mod lifelong;
// pub mod model;
pub mod numerics;
pub mod seeds;
// pub mod trainer;

pub use error::{Error, Result};
pub use numerics::scalar::Scalar;
