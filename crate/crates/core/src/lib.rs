//! Outcome-reward reinforcement learning on synthetic token environments.
//!
//! Tabular softmax policies act on small verifiable tasks. The crate provides
//! the Best-of-N sampling analysis, shaped policy objectives, a token-level
//! credit model, and a deterministic training harness.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod bonmath;
mod checkpoint;
pub mod credit;
pub mod envsim;
pub mod error;
pub mod exec;
pub mod harness;
pub mod policy;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
