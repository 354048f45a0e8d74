//! One flow-matching model over the joint `(theta, y)` space that answers
//! posterior, likelihood, and arbitrary conditional queries by masking.

pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod flowcore;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod sampler;
pub mod tasks;
pub mod trainer;
pub mod vfnet;

pub use error::{Error, Result};
