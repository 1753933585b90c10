//! Comparison schedulers sharing the twin's plant, fleet, estimator and channel.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::estimator::{self, Belief};
use crate::scalar::Real;
use crate::scheduler::{self, QosThresholds, ScheduleDecision};
use crate::sensing::{Fleet, SensingAgentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedulingMode {
    /// Value-of-information scheduling against the RL-requested accuracy.
    Reverb,
    /// The twin sees the true state; nothing is transmitted.
    Perfect,
    /// A fixed number of random agents per QI, fed raw to the policy.
    Traditional,
    /// The `C` nearest agents every QI.
    CostGreedy,
    /// The `C` least noisy agents every QI.
    ErrorGreedy,
}

impl SchedulingMode {
    pub const ALL: [SchedulingMode; 5] = [
        SchedulingMode::Reverb,
        SchedulingMode::Perfect,
        SchedulingMode::Traditional,
        SchedulingMode::CostGreedy,
        SchedulingMode::ErrorGreedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulingMode::Reverb => "REVERB",
            SchedulingMode::Perfect => "PERFECT",
            SchedulingMode::Traditional => "TRADITIONAL",
            SchedulingMode::CostGreedy => "COST_GREEDY",
            SchedulingMode::ErrorGreedy => "ERROR_GREEDY",
        }
    }

    /// Whether the policy reads an EKF belief (as opposed to raw observations).
    pub fn uses_filter(self) -> bool {
        !matches!(self, SchedulingMode::Traditional)
    }
}

impl fmt::Display for SchedulingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        SchedulingMode::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown scheduling mode {s:?}")))
    }
}

/// Sizes used by the baseline schedulers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineParams {
    /// `C`, the per-QI connection limit.
    pub capacity: usize,
    /// Agents queried per QI by [`SchedulingMode::Traditional`].
    pub traditional_agents: usize,
}

/// One scheduling round for any mode.
///
/// `truth` is read only by [`SchedulingMode::Perfect`]. For the filtered
/// modes the returned posterior carries the covariance after fusing the
/// selected agents; [`SchedulingMode::Traditional`] keeps the prior, since its
/// estimate is the raw observation vector.
pub fn baseline_schedule<T: Real, R: Rng + ?Sized>(
    mode: SchedulingMode,
    prior: &Belief<T>,
    truth: &StateVector<T>,
    thresholds: &QosThresholds<T>,
    fleet: &Fleet<T>,
    params: BaselineParams,
    rng: &mut R,
) -> Result<ScheduleDecision<T>> {
    match mode {
        SchedulingMode::Reverb => scheduler::schedule(prior, thresholds, fleet, params.capacity),
        SchedulingMode::Perfect => {
            if truth.dim() != prior.dim() {
                return Err(Error::invalid("true state and belief dimensions differ"));
            }
            let exact = Belief::exact(truth.clone(), prior.qi());
            let mut decision = ScheduleDecision::blind(prior, thresholds);
            decision.satisfied = thresholds.satisfied(exact.cov());
            decision.posterior = exact;
            Ok(decision)
        }
        SchedulingMode::CostGreedy => {
            let mut agents: Vec<_> = fleet.agents().iter().collect();
            agents.sort_by(|a, b| {
                a.distance()
                    .partial_cmp(&b.distance())
                    .expect("finite distances")
                    .then(a.id().cmp(&b.id()))
            });
            agents.truncate(params.capacity);
            fused(prior, thresholds, agents)
        }
        SchedulingMode::ErrorGreedy => {
            let mut agents: Vec<_> = fleet.agents().iter().collect();
            agents.sort_by(|a, b| {
                a.error_level()
                    .partial_cmp(&b.error_level())
                    .expect("finite noise levels")
                    .then(a.id().cmp(&b.id()))
            });
            agents.truncate(params.capacity);
            fused(prior, thresholds, agents)
        }
        SchedulingMode::Traditional => {
            let agents = traditional_pick(prior.dim(), fleet, params.traditional_agents, rng);
            let mut decision = ScheduleDecision::blind(prior, thresholds);
            decision.selected = agents.iter().map(|a| a.id()).collect();
            Ok(decision)
        }
    }
}

fn fused<T: Real>(
    prior: &Belief<T>,
    thresholds: &QosThresholds<T>,
    agents: Vec<&SensingAgentSpec<T>>,
) -> Result<ScheduleDecision<T>> {
    let mut decision = ScheduleDecision::blind(prior, thresholds);
    if agents.is_empty() {
        return Ok(decision);
    }
    let stacked = estimator::stack(&agents)?;
    let cov = estimator::posterior_cov(prior, &stacked)?;
    decision.satisfied = thresholds.satisfied(&cov);
    decision.posterior = Belief::new(prior.mean().clone(), cov, prior.qi())?;
    decision.selected = agents.iter().map(|a| a.id()).collect();
    decision.iterations = agents.len();
    Ok(decision)
}

/// Random agents cycling over the features, never the same agent twice.
fn traditional_pick<'f, T: Real, R: Rng + ?Sized>(
    dim: usize,
    fleet: &'f Fleet<T>,
    count: usize,
    rng: &mut R,
) -> Vec<&'f SensingAgentSpec<T>> {
    let mut chosen: Vec<&SensingAgentSpec<T>> = Vec::with_capacity(count);
    for i in 0..count.min(fleet.len()) {
        let feature = i % dim.max(1);
        let pool: Vec<_> = fleet
            .agents_measuring(feature)
            .into_iter()
            .filter(|a| chosen.iter().all(|c| c.id() != a.id()))
            .collect();
        let pool = if pool.is_empty() {
            fleet
                .agents()
                .iter()
                .filter(|a| chosen.iter().all(|c| c.id() != a.id()))
                .collect()
        } else {
            pool
        };
        if let Some(a) = pool.choose(rng) {
            chosen.push(a);
        }
    }
    chosen
}
