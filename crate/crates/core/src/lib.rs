//! Word-order inductive biases of sequence-to-sequence agents.
//!
//! Miniature languages describing gridworld trajectories are generated,
//! taught to LSTM encoder-decoder agents that both speak and listen, and
//! passed down lineages of agents (iterated learning). The [`metrics`]
//! module computes the diagnostics used to compare languages.

pub mod error;
pub mod evolution;
pub mod agent;
pub mod corpus;
pub mod grammar;
pub mod metrics;
pub mod gridworld;
pub mod neural;
pub mod training;

pub use error::{Error, Result};
