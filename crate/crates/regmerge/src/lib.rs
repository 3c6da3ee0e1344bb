//! Closed-form continual model merging for linear layers with LoRA adapters.
//!
//! Task models fine-tuned from a shared initialization are merged without
//! revisiting past data: each linear layer keeps the Gram matrix of its
//! captured inputs as a sufficient statistic, and the merge solves the
//! induced least-squares problem in closed form. The incremental variant
//! carries a running Gram accumulator so a sequence of tasks can be folded
//! in one at a time. A synthetic domain-incremental benchmark measures
//! retention against sequential fine-tuning, plain parameter averaging,
//! independent per-task training, and a frozen model.

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod merging;
pub mod model;
pub mod plot;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
