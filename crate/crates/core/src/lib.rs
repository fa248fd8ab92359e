//! Minimax optimal dual control for single-input linear systems
//! `x+ = Ax + Bu + w` whose input vector `B` is unknown up to an admissible set.
//!
//! The crate provides the feedback law, the explicit value function and
//! its Bellman inequality check, a closed-loop simulator with Monte-Carlo gain
//! certification, and the verification suites driven by the `dualmax` CLI.

pub mod bellman;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod policy;
pub mod problem;
pub mod simulator;
pub mod statistics;
pub mod uncertainty;
pub mod verify;

pub use error::{DualError, Result};
pub use nalgebra;
pub use policy::{ActionDistribution, Branch, Policy, PolicyDecision};
pub use problem::ProblemData;
pub use statistics::DataMatrix;
pub use uncertainty::{ConeParams, SetKind};
