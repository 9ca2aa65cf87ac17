//! Contextual transfer of source policies through a learned mixture of source
//! dynamics models, with reward-shaping and policy-reuse strategies, tabular and
//! deep Q-learning agents, benchmark environments and verification oracles.

pub mod error;
pub mod mdp;
pub mod nn;
pub mod envs;
pub mod sources;
pub mod mixture;
pub mod agents;
pub mod transfer;
pub mod verify;
pub mod bench;

pub use error::{Error, Result};

#[cfg(test)]
mod oracle_tests;
