//! Extended Kalman filter holding the digital twin's belief about the plant.
//!
//! `predict` is the blind (prior) update; `update` fuses the stacked
//! observations of the scheduled agents. Covariances are updated in Joseph
//! form and re-symmetrized after every operation.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Plant, StateVector};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sensing::{AgentId, SensingAgentSpec};

/// Largest accepted condition number of the innovation covariance.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Gaussian belief `N(mean, cov)` over the plant state at QI `qi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief<T: Real> {
    mean: StateVector<T>,
    cov: DMatrix<T>,
    qi: u64,
}

impl<T: Real> Belief<T> {
    pub fn new(mean: StateVector<T>, cov: DMatrix<T>, qi: u64) -> Result<Self> {
        let k = mean.dim();
        if cov.shape() != (k, k) {
            return Err(Error::invalid(format!(
                "belief covariance must be {k}x{k}, got {:?}",
                cov.shape()
            )));
        }
        if !mean.is_finite() || cov.iter().any(|v| !v.is_finite_real()) {
            return Err(Error::invalid("belief has non-finite entries"));
        }
        if (0..k).any(|i| cov[(i, i)] < T::zero()) {
            return Err(Error::invalid("belief covariance has a negative variance"));
        }
        Ok(Self {
            mean,
            cov: symmetrize(cov),
            qi,
        })
    }

    /// A point-mass belief (zero covariance) at `state`.
    pub fn exact(state: StateVector<T>, qi: u64) -> Self {
        let k = state.dim();
        Self {
            mean: state,
            cov: DMatrix::zeros(k, k),
            qi,
        }
    }

    pub fn mean(&self) -> &StateVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn qi(&self) -> u64 {
        self.qi
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// `[Ψ]_k`, the marginal variance of feature `k`.
    pub fn variance(&self, k: usize) -> T {
        self.cov[(k, k)]
    }

    pub fn variances(&self) -> Vec<T> {
        (0..self.dim()).map(|k| self.variance(k)).collect()
    }

    pub fn std_devs(&self) -> Vec<T> {
        (0..self.dim()).map(|k| self.variance(k).max(T::zero()).sqrt()).collect()
    }

    /// Accuracy `η_k = 1 / [Ψ]_k`; infinite for a zero variance.
    pub fn accuracy(&self, k: usize) -> T {
        let v = self.variance(k);
        if v == T::zero() {
            T::max_value().expect("bounded scalar")
        } else {
            T::one() / v
        }
    }

    pub(crate) fn with_cov(&self, cov: DMatrix<T>) -> Self {
        Self {
            mean: self.mean.clone(),
            cov,
            qi: self.qi,
        }
    }
}

/// `(Ψ + Ψᵀ) / 2`.
pub fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    let t = m.transpose();
    (m + t) * half
}

fn numerical(qi: u64, reason: impl Into<String>) -> Error {
    Error::NumericalFailure {
        qi,
        reason: reason.into(),
    }
}

/// Blind update: `mean' = f(mean, a)`, `Ψ' = P Ψ Pᵀ + C_u` with `P` the
/// Jacobian at the previous mean.
///
/// The mean is propagated without sampled process noise; `C_u` enters only
/// through the covariance.
pub fn predict<T: Real, P: Plant<T>>(belief: &Belief<T>, control: &[T], plant: &P) -> Result<Belief<T>> {
    if belief.dim() != plant.state_dim() {
        return Err(Error::invalid("belief and plant dimensions differ"));
    }
    let qi = belief.qi + 1;
    let mean = plant.transition(&belief.mean, control)?;
    let jac = plant.jacobian(&belief.mean, control)?;
    let cov = &jac * &belief.cov * jac.transpose() + plant.process_noise();
    let cov = symmetrize(cov);
    if !mean.is_finite() || cov.iter().any(|v| !v.is_finite_real()) {
        return Err(numerical(qi, "non-finite prior"));
    }
    Ok(Belief { mean, cov, qi })
}

/// Stacked observation model of the scheduled agents: `H_t = [H_1; H_2; ...]`
/// and `C_w = blockdiag(C_1, C_2, ...)` in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservationModel<T: Real> {
    observation: DMatrix<T>,
    noise_cov: DMatrix<T>,
    agents: Vec<AgentId>,
}

impl<T: Real> StackedObservationModel<T> {
    pub fn observation_matrix(&self) -> &DMatrix<T> {
        &self.observation
    }

    pub fn noise_cov(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }
}

pub fn stack<T: Real>(selected: &[&SensingAgentSpec<T>]) -> Result<StackedObservationModel<T>> {
    let Some(first) = selected.first() else {
        return Err(Error::invalid("cannot stack an empty selection"));
    };
    let k = first.state_dim();
    let mut agents = Vec::with_capacity(selected.len());
    for a in selected {
        if agents.contains(&a.id()) {
            return Err(Error::invalid(format!("agent {} selected twice", a.id())));
        }
        if a.state_dim() != k {
            return Err(Error::invalid("selected agents disagree on state dimension"));
        }
        agents.push(a.id());
    }
    let rows: usize = selected.iter().map(|a| a.obs_dim()).sum();
    let mut observation = DMatrix::zeros(rows, k);
    let mut noise_cov = DMatrix::zeros(rows, rows);
    let mut r = 0;
    for a in selected {
        let d = a.obs_dim();
        observation.rows_mut(r, d).copy_from(a.observation_matrix());
        noise_cov.view_mut((r, r), (d, d)).copy_from(a.noise_cov());
        r += d;
    }
    Ok(StackedObservationModel {
        observation,
        noise_cov,
        agents,
    })
}

/// Kalman gain and Joseph-form posterior covariance for a stacked model.
fn gain_and_cov<T: Real>(
    prior_cov: &DMatrix<T>,
    stacked: &StackedObservationModel<T>,
    qi: u64,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let h = &stacked.observation;
    if h.ncols() != prior_cov.nrows() {
        return Err(Error::invalid(format!(
            "observation model has {} columns, belief has dimension {}",
            h.ncols(),
            prior_cov.nrows()
        )));
    }
    let ph_t = prior_cov * h.transpose();
    let innovation = symmetrize(&stacked.noise_cov + h * &ph_t);
    let eig = innovation.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > T::zero()) || (hi / lo).f64() > MAX_INNOVATION_CONDITION {
        return Err(numerical(
            qi,
            format!(
                "innovation covariance ill-conditioned (eigenvalues {:.3e}..{:.3e})",
                lo.f64(),
                hi.f64()
            ),
        ));
    }
    let chol = innovation
        .cholesky()
        .ok_or_else(|| numerical(qi, "innovation covariance not positive definite"))?;
    // K = Ψ Hᵀ S⁻¹ = (S⁻¹ H Ψ)ᵀ
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let n = prior_cov.nrows();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let cov = &i_kh * prior_cov * i_kh.transpose() + &gain * &stacked.noise_cov * gain.transpose();
    let cov = symmetrize(cov);
    if cov.iter().any(|v| !v.is_finite_real()) {
        return Err(numerical(qi, "non-finite posterior covariance"));
    }
    Ok((gain, cov))
}

/// Posterior covariance only; needs no observation values.
pub fn posterior_cov<T: Real>(prior: &Belief<T>, stacked: &StackedObservationModel<T>) -> Result<DMatrix<T>> {
    gain_and_cov(&prior.cov, stacked, prior.qi).map(|(_, c)| c)
}

/// Fuses the stacked observation vector into the prior.
pub fn update<T: Real>(
    prior: &Belief<T>,
    stacked: &StackedObservationModel<T>,
    observations: &DVector<T>,
) -> Result<Belief<T>> {
    if observations.len() != stacked.obs_dim() {
        return Err(Error::invalid(format!(
            "expected {} stacked observations, got {}",
            stacked.obs_dim(),
            observations.len()
        )));
    }
    let (gain, cov) = gain_and_cov(&prior.cov, stacked, prior.qi)?;
    let innovation = observations - &stacked.observation * prior.mean.as_vector();
    let mean = prior.mean.as_vector() + gain * innovation;
    if mean.iter().any(|v| !v.is_finite_real()) {
        return Err(numerical(prior.qi, "non-finite posterior mean"));
    }
    Ok(Belief {
        mean: mean.into(),
        cov,
        qi: prior.qi,
    })
}
