//! Digital-twin simulation of a networked control loop.
//!
//! The twin tracks a nonlinear plant with an extended Kalman filter,
//! schedules sensing agents by value of information under a capacity limit,
//! allocates the minimum uplink power meeting a Rician latency-outage
//! constraint, and controls the plant with a PPO agent that also chooses how
//! accurate the state estimate has to be.
//!
//! Numeric modules are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the precision used by the experiment harness.

pub mod agent;
pub mod baselines;
pub mod channel;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod harness;
mod gaussian;
pub mod scalar;
pub mod scheduler;
pub mod sensing;
pub mod twin;

pub use error::{Error, Result};
pub use scalar::Real;

pub type StateVector64 = dynamics::StateVector<f64>;
pub type Belief64 = estimator::Belief<f64>;
pub type MountainCar64 = dynamics::MountainCar<f64>;
pub type Fleet64 = sensing::Fleet<f64>;
pub type ScheduleDecision64 = scheduler::ScheduleDecision<f64>;
pub type Twin64 = twin::Twin<f64>;
pub type TrainedPolicy64 = agent::TrainedPolicy<f64>;

pub type StateVector32 = dynamics::StateVector<f32>;
pub type Belief32 = estimator::Belief<f32>;
pub type MountainCar32 = dynamics::MountainCar<f32>;
pub type Fleet32 = sensing::Fleet<f32>;
