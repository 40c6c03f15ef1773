//! Learning rigid-body dynamics with Lagrangian neural networks inside a
//! Dyna-style reinforcement-learning loop.
//!
//! The crate is organized bottom-up:
//!
//! * [`nn`]: scalar networks with exact input/weight derivatives
//! * [`lnn`]: the Lagrangian-to-acceleration operator and its losses
//! * [`integrate`]: explicit two-stage Runge-Kutta stepping and rollouts
//! * [`optim`]: gradient (SGD/Adam) and extended-Kalman-filter trainers
//! * [`envs`]: the torque-limited pendulum swing-up task
//! * [`agent`]: a stochastic actor-critic trained on real and synthetic data
//! * [`dyna`]: the orchestration loop tying model learning to the agent
//! * [`report`]: metrics/metadata serialization for experiment runs
//! * [`checks`]: self-contained numerical invariant checks

pub mod agent;
pub mod checks;
pub mod dyna;
pub mod envs;
pub mod error;
pub mod integrate;
pub mod lnn;
pub mod nn;
pub mod optim;
pub mod report;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
