//! Hierarchical reinforcement learning for UAV mobility management in a
//! simulated space-air-ground integrated network.
//!
//! A top-level double-DQN agent decides whether to keep or switch the
//! serving base station; a lower-level Lagrangian-constrained soft
//! actor-critic steers the UAV. The crate also carries the urban channel
//! simulator both agents train against, the comparison baselines and the
//! metrics harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod config;
pub mod csac;
pub mod ddqn;
pub mod env;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod scalar;
pub mod scenario;
pub mod trainer;

pub use config::{NetworkKind, RunConfig};
pub use error::{Error, Result};
pub use geom::Vec3;
pub use scalar::Scalar;

/// Single-precision network, the default for training.
pub type Mlp32 = nn::Mlp<f32>;
pub type Mlp64 = nn::Mlp<f64>;
pub type DdqnAgent32 = ddqn::DdqnAgent<f32>;
pub type DdqnAgent64 = ddqn::DdqnAgent<f64>;
pub type CsacAgent32 = csac::CsacAgent<f32>;
pub type CsacAgent64 = csac::CsacAgent<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
/// Double-precision run, used where gradients are checked against finite differences.
pub type Trainer64 = trainer::Trainer<f64>;
