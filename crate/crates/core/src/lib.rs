//! Box-World environment and self-attention actor-critic agents.

pub mod agent;
pub mod env;
pub mod harness;
pub mod relational;
pub mod rng;
pub mod tensor;
pub mod trainer;
