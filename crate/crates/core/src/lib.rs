//! Dynamical low-rank training with momentum.

pub mod error;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod lowrank;
pub mod net;
pub mod optim;

pub use error::{Error, Result};
