//! Multi-satellite beam-hopping simulator and scheduler laboratory.
//!
//! The crate models a forward-link NGSO beam-hopping system (antenna pattern,
//! free-space loss, full-frequency-reuse SINR, age-bucketed cell queues), wraps
//! it as a slotted MDP, and trains a hybrid discrete/continuous PPO agent that
//! picks beam illumination patterns and per-beam powers. Heuristic schedulers
//! (throughput-, delay-, and weight-priority) share the same action interface.
//!
//! Numerical kernels (`channel`, `linklayer`, `neuralnet`, `ppo` math) are
//! generic over [`Scalar`]; the simulator and trainer run in `f64` through the
//! aliases re-exported here.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod env;
mod error;
pub mod harness;
pub mod linklayer;
pub mod neuralnet;
pub mod ppo;
pub mod queueing;
mod scalar;
pub mod scenario;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use config::Config;
pub use env::{Env, EnvState, HybridAction, StepInfo};
pub use scenario::Scenario;

/// Dense network in double precision (the trainer's working type).
pub type DenseNet = neuralnet::DenseNet<f64>;
/// Single-precision dense network, for inference-only use.
pub type DenseNet32 = neuralnet::DenseNet<f32>;
/// Adam optimizer state in double precision.
pub type AdamState = neuralnet::AdamState<f64>;
/// Antenna description in double precision.
pub type Antenna = channel::Antenna<f64>;
/// Hybrid PPO agent in double precision.
pub type Agent = ppo::Agent<f64>;
/// Policy head outputs in double precision.
pub type PolicyOutput = ppo::PolicyOutput<f64>;
