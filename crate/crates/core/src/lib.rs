//! Maximum-entropy value decomposition for cooperative multi-agent RL.
//!
//! Local Q-networks are combined by an IGM-consistent mixer (QMIX or VDN).
//! Stochastic local policies are produced by order-preserving transformations
//! (OPTs) of the local Q-values, so the highest-probability local actions always
//! compose the joint action that maximizes the mixed value.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffmath`]: parameter stores, dense layers, hand-written backward passes,
//!   Adam, finite-difference gradient checks and the checkpoint format.
//! - [`envs`]: the non-monotonic matrix game and a two-agent pressure-plate gridworld.
//! - [`agentnet`], [`mixer`], [`opt`], [`policy`]: the networks.
//! - [`learner`]: replay, TD(λ) targets with the entropy correction, the three losses
//!   and the training loop.
//! - [`diagnostics`]: Q-gap, IGM violation rate, Δ_Q statistics and the
//!   policy-improvement gap bound.
//! - [`config`], [`metrics`], [`replaybook`], [`ops`]: run configuration, metrics
//!   stream, experiment suites and the operator-facing commands.
//! - [`api`]: request and response bodies of the HTTP service.

pub mod agentnet;
pub mod api;
pub mod config;
pub mod diagnostics;
pub mod diffmath;
pub mod envs;
mod error;
pub mod learner;
pub mod metrics;
pub mod mixer;
pub mod ops;
pub mod opt;
pub mod policy;
pub mod replaybook;
pub mod rng;

pub use error::{Error, Result};
