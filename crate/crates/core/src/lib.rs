//! Multi-task value networks, per-task binary weight masks, and the
//! structural statistics computed over the resulting subnetworks.
//!
//! The pipeline has four stages:
//!
//! 1. [`dqn::train`] fits a contextual Q-network on the colour-collection
//!    [`gridworld`], with the task identity appended to the observation as a
//!    one-hot context.
//! 2. [`dqn::collect_states`] samples states for one task from the frozen
//!    network's own rollouts.
//! 3. [`masker::learn_mask`] learns a binary mask over the frozen weights with
//!    sigmoid logits and a straight-through estimator, then extracts the hard
//!    subnetwork.
//! 4. [`analysis`] compares the per-task masks (shared vs task-specific
//!    weights, context-column usage) and evaluates every subnetwork on every
//!    task.
//!
//! [`persist`] holds the experiment config and the on-disk formats.

pub mod analysis;
pub mod dqn;
mod error;
pub mod exec;
pub mod gridworld;
pub mod masker;
pub mod persist;
pub mod qnet;
pub mod seeds;

pub use error::{Error, Result};
pub use exec::Execution;
