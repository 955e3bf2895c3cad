//! Learned experience-replay sampling for off-policy reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`sumtree`] — proportional sampling over per-transition priorities.
//! - [`replay`] — the transition buffer, feature rows and importance weights.
//! - [`tinynn`] — dense networks with manual backpropagation and Adam.
//! - [`sampler`] — RANDOM, PER, ERO and the learned set-based sampler (NERS).
//! - [`agents`] — a discrete Q-learner and a TD3-style actor-critic.
//! - [`envs`] — sparse pendulum, chain MDP and point-mass tasks.
//! - [`harness`] — the training loop, logging and multi-seed comparison.

pub mod agents;
pub mod envs;
pub mod error;
pub mod harness;
pub mod replay;
pub mod sampler;
pub mod sumtree;
pub mod tinynn;

pub use error::{Error, Result};
