//! Value-of-information scheduling of sensing agents.
//!
//! Each QI the twin compares its prior variances against the effective caps
//! `min(ξ²_k, 1/η_k)`. If every cap holds nothing is scheduled. Otherwise
//! agents are added greedily: take the feature with the largest
//! variance-to-cap ratio that some remaining agent can measure, add the
//! least noisy such agent, recompute the posterior covariance, and repeat
//! until the caps hold, the capacity is reached, or no candidate remains.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimator::{self, Belief};
use crate::scalar::Real;
use crate::sensing::{AgentId, Fleet, Observation, SensingAgentSpec};

/// `ξ̄²_k = min(ξ²_k, 1/η_k)`, with `1/0 = ∞`.
pub fn effective_thresholds<T: Real>(caps: &[T], accuracy: &[T]) -> Result<Vec<T>> {
    if caps.len() != accuracy.len() {
        return Err(Error::invalid(format!(
            "{} variance caps but {} requested accuracies",
            caps.len(),
            accuracy.len()
        )));
    }
    caps.iter()
        .zip(accuracy)
        .map(|(&cap, &eta)| {
            if !(cap > T::zero()) || !cap.is_finite_real() {
                return Err(Error::invalid("variance caps must be positive and finite"));
            }
            if !(eta >= T::zero()) {
                return Err(Error::invalid("requested accuracy must be non-negative"));
            }
            if eta == T::zero() {
                Ok(cap)
            } else {
                Ok(cap.min(T::one() / eta))
            }
        })
        .collect()
}

/// DT caps, the accuracy the RL agent asked for, and the caps in force.
#[derive(Debug, Clone, PartialEq)]
pub struct QosThresholds<T: Real> {
    caps: Vec<T>,
    requested: Vec<T>,
    effective: Vec<T>,
}

impl<T: Real> QosThresholds<T> {
    pub fn new(caps: Vec<T>, requested: Vec<T>) -> Result<Self> {
        let effective = effective_thresholds(&caps, &requested)?;
        Ok(Self {
            caps,
            requested,
            effective,
        })
    }

    /// Thresholds from the DT caps alone (`η = 0`).
    pub fn caps_only(caps: Vec<T>) -> Result<Self> {
        let zeros = vec![T::zero(); caps.len()];
        Self::new(caps, zeros)
    }

    pub fn caps(&self) -> &[T] {
        &self.caps
    }

    pub fn requested(&self) -> &[T] {
        &self.requested
    }

    pub fn effective(&self) -> &[T] {
        &self.effective
    }

    pub fn dim(&self) -> usize {
        self.effective.len()
    }

    /// `[Ψ]_k / ξ̄²_k` for every feature.
    pub fn ratios(&self, cov: &DMatrix<T>) -> Vec<T> {
        self.effective
            .iter()
            .enumerate()
            .map(|(k, &cap)| cov[(k, k)] / cap)
            .collect()
    }

    pub fn satisfied(&self, cov: &DMatrix<T>) -> Vec<bool> {
        self.effective
            .iter()
            .enumerate()
            .map(|(k, &cap)| cov[(k, k)] <= cap)
            .collect()
    }
}

/// Outcome of one scheduling round.
///
/// `posterior` carries the posterior covariance with the prior mean; call
/// [`ScheduleDecision::fuse`] with the received observations for the mean.
#[derive(Debug, Clone)]
pub struct ScheduleDecision<T: Real> {
    pub selected: Vec<AgentId>,
    pub posterior: Belief<T>,
    pub prior_ratios: Vec<T>,
    pub satisfied: Vec<bool>,
    pub iterations: usize,
}

impl<T: Real> ScheduleDecision<T> {
    /// A decision that schedules nobody and keeps the prior.
    pub fn blind(prior: &Belief<T>, thresholds: &QosThresholds<T>) -> Self {
        Self {
            selected: Vec::new(),
            posterior: prior.clone(),
            prior_ratios: thresholds.ratios(prior.cov()),
            satisfied: thresholds.satisfied(prior.cov()),
            iterations: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Agents of the decision in selection order.
    pub fn agents<'f>(&self, fleet: &'f Fleet<T>) -> Result<Vec<&'f SensingAgentSpec<T>>> {
        self.selected
            .iter()
            .map(|id| {
                fleet
                    .get(*id)
                    .ok_or_else(|| Error::invalid(format!("agent {id} not in fleet")))
            })
            .collect()
    }

    /// Joint posterior update of `prior` with one observation per selected
    /// agent, in any order.
    pub fn fuse(
        &self,
        prior: &Belief<T>,
        fleet: &Fleet<T>,
        observations: &[Observation<T>],
    ) -> Result<Belief<T>> {
        if self.selected.is_empty() {
            return Ok(prior.clone());
        }
        if observations.len() != self.selected.len() {
            return Err(Error::invalid(format!(
                "{} agents scheduled but {} observations received",
                self.selected.len(),
                observations.len()
            )));
        }
        let agents = self.agents(fleet)?;
        let stacked = estimator::stack(&agents)?;
        let mut values = Vec::with_capacity(stacked.obs_dim());
        for id in &self.selected {
            let obs = observations
                .iter()
                .find(|o| o.agent == *id)
                .ok_or_else(|| Error::invalid(format!("no observation from agent {id}")))?;
            values.extend(obs.values.iter().copied());
        }
        estimator::update(prior, &stacked, &nalgebra::DVector::from_vec(values))
    }
}

/// Greedy VoI selection of at most `capacity` agents.
pub fn schedule<T: Real>(
    prior: &Belief<T>,
    thresholds: &QosThresholds<T>,
    fleet: &Fleet<T>,
    capacity: usize,
) -> Result<ScheduleDecision<T>> {
    let dim = prior.dim();
    if thresholds.dim() != dim {
        return Err(Error::invalid(format!(
            "{} thresholds for a {dim}-dimensional belief",
            thresholds.dim()
        )));
    }
    if let Some(a) = fleet.agents().iter().find(|a| a.state_dim() != dim) {
        return Err(Error::invalid(format!(
            "agent {} observes a {}-dimensional state, belief has {dim}",
            a.id(),
            a.state_dim()
        )));
    }
    let prior_ratios = thresholds.ratios(prior.cov());
    if thresholds.satisfied(prior.cov()).iter().all(|&ok| ok) {
        return Ok(ScheduleDecision::blind(prior, thresholds));
    }

    let mut available: Vec<&SensingAgentSpec<T>> = fleet.agents().iter().collect();
    let mut selected: Vec<&SensingAgentSpec<T>> = Vec::new();
    let mut cov = prior.cov().clone();
    let mut iterations = 0;

    while selected.len() < capacity && thresholds.satisfied(&cov).iter().any(|&ok| !ok) {
        let ratios = thresholds.ratios(&cov);
        let mut best: Option<(usize, T)> = None;
        for (k, &r) in ratios.iter().enumerate() {
            if !available.iter().any(|a| a.measures(k)) {
                continue;
            }
            if best.is_none_or(|(_, br)| r > br) {
                best = Some((k, r));
            }
        }
        let Some((feature, _)) = best else { break };

        let pick = available
            .iter()
            .enumerate()
            .filter(|(_, a)| a.measures(feature))
            .min_by(|(_, a), (_, b)| {
                a.error_level()
                    .partial_cmp(&b.error_level())
                    .expect("finite noise levels")
                    .then(a.id().cmp(&b.id()))
            })
            .map(|(i, _)| i)
            .expect("candidate feature has an agent");
        selected.push(available.remove(pick));
        iterations += 1;

        let stacked = estimator::stack(&selected)?;
        cov = estimator::posterior_cov(prior, &stacked)?;
    }
    assert!(iterations <= capacity, "scheduler exceeded its capacity");

    Ok(ScheduleDecision {
        selected: selected.iter().map(|a| a.id()).collect(),
        satisfied: thresholds.satisfied(&cov),
        posterior: prior.with_cov(cov),
        prior_ratios,
        iterations,
    })
}

/// `(1-α) Σ_k max([Ψ]_k/ξ̄²_k - 1, 0) + α Σ_m p_m`, logged per QI.
pub fn weighted_objective<T: Real>(
    posterior_cov: &DMatrix<T>,
    thresholds: &QosThresholds<T>,
    weight: T,
    powers: &[T],
) -> T {
    let hinge = thresholds
        .ratios(posterior_cov)
        .into_iter()
        .fold(T::zero(), |acc, r| acc + (r - T::one()).max(T::zero()));
    let power = powers.iter().fold(T::zero(), |acc, &p| acc + p);
    (T::one() - weight) * hinge + weight * power
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StateVector;
    use nalgebra::DVector;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn prior(v: &[f64]) -> Belief<f64> {
        Belief::new(StateVector::from_slice(&[0.0, 0.0]), diag(v), 0).unwrap()
    }

    fn fleet(agents: &[(u32, usize, f64)]) -> Fleet<f64> {
        Fleet::new(
            agents
                .iter()
                .map(|&(id, k, var)| SensingAgentSpec::scalar(id, k, 2, var, 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn effective_threshold_cases() {
        let caps = [0.01, 0.001];
        assert_eq!(effective_thresholds(&caps, &[0.0, 0.0]).unwrap(), vec![0.01, 0.001]);
        assert_eq!(effective_thresholds(&caps, &[1000.0, 0.0]).unwrap(), vec![0.001, 0.001]);
        assert_eq!(effective_thresholds(&caps, &[10.0, 10.0]).unwrap(), vec![0.01, 0.001]);
        assert!(effective_thresholds(&caps, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn satisfied_prior_schedules_nobody() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(1, 0, 0.01), (2, 1, 0.001)]);
        let d = schedule(&prior(&[0.005, 0.0005]), &q, &f, 10).unwrap();
        assert!(d.selected.is_empty());
        assert_eq!(d.iterations, 0);
        assert_eq!(d.posterior, prior(&[0.005, 0.0005]));
    }

    #[test]
    fn single_position_agent_fixes_position() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(1, 0, 0.01)]);
        let d = schedule(&prior(&[0.02, 0.0005]), &q, &f, 10).unwrap();
        assert_eq!(d.selected, vec![1]);
        assert_eq!(d.iterations, 1);
        assert!((d.posterior.variance(0) - 0.02 * 0.01 / 0.03).abs() < 1e-15);
        assert_eq!(d.satisfied, vec![true, true]);
        assert_eq!(d.prior_ratios, vec![2.0, 0.5]);
    }

    #[test]
    fn zero_capacity_leaves_violation() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(1, 0, 0.01)]);
        let d = schedule(&prior(&[0.02, 0.0005]), &q, &f, 0).unwrap();
        assert!(d.selected.is_empty());
        assert_eq!(d.satisfied, vec![false, true]);
    }

    #[test]
    fn least_noisy_agent_first_and_ties_by_id() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(3, 0, 0.05), (2, 0, 0.02), (1, 0, 0.02), (4, 1, 0.001)]);
        let d = schedule(&prior(&[0.5, 0.0005]), &q, &f, 1).unwrap();
        assert_eq!(d.selected, vec![1]);
    }

    #[test]
    fn stops_when_no_candidate_remains() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(1, 0, 1.0)]);
        let d = schedule(&prior(&[5.0, 0.0005]), &q, &f, 10).unwrap();
        assert_eq!(d.selected, vec![1]);
        assert_eq!(d.satisfied, vec![false, true]);
    }

    #[test]
    fn fuse_updates_mean() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let f = fleet(&[(1, 0, 0.01)]);
        let p = prior(&[0.02, 0.0005]);
        let d = schedule(&p, &q, &f, 10).unwrap();
        let obs = Observation {
            agent: 1,
            values: DVector::from_element(1, 0.3),
            qi: 0,
        };
        let post = d.fuse(&p, &f, &[obs]).unwrap();
        assert!((post.mean().get(0) - 0.3 * 0.02 / 0.03).abs() < 1e-15);
        assert!((post.cov() - d.posterior.cov()).abs().max() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let q = QosThresholds::caps_only(vec![0.01]).unwrap();
        let f = fleet(&[(1, 0, 0.01)]);
        assert!(matches!(
            schedule(&prior(&[0.02, 0.0005]), &q, &f, 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn objective_cases() {
        let q = QosThresholds::caps_only(vec![0.01, 0.001]).unwrap();
        let met = diag(&[0.005, 0.0005]);
        assert!((weighted_objective(&met, &q, 1.0, &[0.001, 0.002]) - 0.003).abs() < 1e-15);
        let doubled = diag(&[0.02, 0.0005]);
        assert!((weighted_objective(&doubled, &q, 0.0, &[]) - 1.0).abs() < 1e-15);
        assert!((weighted_objective(&doubled, &q, 0.5, &[0.004]) - 0.502).abs() < 1e-15);
    }
}
