//! The uncertainty-controlling RL agent.
//!
//! Its action holds the plant control followed by one requested accuracy
//! `η_k` (an inverse variance) per state feature. The policy sees the belief
//! mean and per-feature standard deviations.

mod checkpoint;
mod network;
mod ppo;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use network::{gaussian_log_prob, ActorCritic, Mlp, OutputActivation, PolicyOutput};
pub use ppo::{
    gae, ppo_update, train, Adam, CurvePoint, Optimizers, PpoHyperparams, RunningStats, TrainedPolicy,
    Transition, UpdateStats,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sign convention for the accuracy cost in the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CostMode {
    /// `r - κ mean_k η_k`: asking for accuracy costs reward.
    #[default]
    Penalty,
    /// `r + κ Σ_k η_k / 2`, rewarding accuracy.
    PaperEq24,
}

/// A decoded policy action.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAction<T: Real> {
    /// Plant control in `[-1, 1]`.
    pub control: Vec<T>,
    /// Requested accuracies in `[0, η_max]`.
    pub accuracy: Vec<T>,
}

/// Maps a raw policy output of length `controls + K` onto an action.
///
/// Controls are clamped to `[-1, 1]`; accuracies use
/// `η = η_max (raw + 1) / 2` clamped to `[0, η_max]`. Infinite inputs clamp
/// to the nearest bound; NaN is rejected.
pub fn decode_action<T: Real>(raw: &[T], controls: usize, eta_max: T) -> Result<AugmentedAction<T>> {
    if raw.len() < controls {
        return Err(Error::invalid(format!(
            "raw action of length {} has fewer than {controls} controls",
            raw.len()
        )));
    }
    if raw.iter().any(|v| v.f64().is_nan()) {
        return Err(Error::invalid("raw action contains NaN"));
    }
    let one = T::one();
    let control = raw[..controls].iter().map(|&v| v.clamp(-one, one)).collect();
    let half = T::lit(0.5);
    let accuracy = raw[controls..]
        .iter()
        .map(|&v| (eta_max * (v.clamp(-one, one) + one) * half).clamp(T::zero(), eta_max))
        .collect();
    Ok(AugmentedAction { control, accuracy })
}

/// Mountain-car per-QI reward: `-0.1 a²`, plus `goal_bonus` on reaching the goal.
pub fn base_reward<T: Real>(control: T, reached_goal: bool, goal_bonus: T) -> T {
    let r = -T::lit(0.1) * control * control;
    if reached_goal {
        r + goal_bonus
    } else {
        r
    }
}

/// Adds the accuracy cost to a base reward.
pub fn shape_reward<T: Real>(reward: T, accuracy: &[T], kappa: T, mode: CostMode) -> T {
    if accuracy.is_empty() || kappa == T::zero() {
        return reward;
    }
    let sum = accuracy.iter().fold(T::zero(), |acc, &e| acc + e);
    match mode {
        CostMode::Penalty => reward - kappa * sum / T::from_usize(accuracy.len()).unwrap(),
        CostMode::PaperEq24 => reward + kappa * T::lit(0.5) * sum,
    }
}

/// Anything that maps policy features to a raw action.
pub trait Policy<T: Real>: Sync {
    fn act(&self, input: &PolicyInput<T>) -> Result<Vec<T>>;
}

impl<T: Real, F> Policy<T> for F
where
    F: Fn(&PolicyInput<T>) -> Vec<T> + Sync,
{
    fn act(&self, input: &PolicyInput<T>) -> Result<Vec<T>> {
        Ok(self(input))
    }
}

/// Policy features: belief mean followed by per-feature standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput<T: Real> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> PolicyInput<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::invalid("policy input mean and std lengths differ"));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite_real()) {
            return Err(Error::invalid("policy input is not finite"));
        }
        if std.iter().any(|&s| s < T::zero()) {
            return Err(Error::invalid("negative standard deviation in policy input"));
        }
        Ok(Self { mean, std })
    }

    pub fn to_features(&self) -> Vec<T> {
        self.mean.iter().chain(&self.std).copied().collect()
    }

    pub fn len(&self) -> usize {
        2 * self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}
