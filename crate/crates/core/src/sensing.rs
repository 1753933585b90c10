//! Sensing agents: linear observations of the plant state with Gaussian noise.
//!
//! Features are indexed from zero (`0` = position, `1` = velocity for the
//! mountain car). Agent ids start at 1.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::gaussian::NoiseFactor;
use crate::scalar::Real;

pub type AgentId = u32;

/// One sensing agent `o = H s + w`, `w ~ N(0, C_w)`, at distance `d` from the AP.
#[derive(Debug, Clone)]
pub struct SensingAgentSpec<T: Real> {
    id: AgentId,
    observation: DMatrix<T>,
    noise_cov: DMatrix<T>,
    distance: T,
    noise: NoiseFactor<T>,
}

impl<T: Real> SensingAgentSpec<T> {
    pub fn new(
        id: AgentId,
        observation: DMatrix<T>,
        noise_cov: DMatrix<T>,
        distance: T,
    ) -> Result<Self> {
        let d = observation.nrows();
        if d == 0 || d > observation.ncols() {
            return Err(Error::invalid(format!(
                "agent {id}: observation matrix must have 1..=K rows"
            )));
        }
        if noise_cov.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "agent {id}: noise covariance must be {d}x{d}"
            )));
        }
        if (&noise_cov - noise_cov.transpose()).abs().max() > T::lit(1e-12) {
            return Err(Error::invalid(format!(
                "agent {id}: noise covariance not symmetric"
            )));
        }
        if noise_cov.clone().cholesky().is_none() {
            return Err(Error::invalid(format!(
                "agent {id}: noise covariance not positive definite"
            )));
        }
        if observation
            .row_iter()
            .any(|row| row.iter().all(|v| *v == T::zero()))
        {
            return Err(Error::invalid(format!(
                "agent {id}: observation matrix has a zero row"
            )));
        }
        if !(distance > T::zero()) || !distance.is_finite_real() {
            return Err(Error::invalid(format!("agent {id}: distance must be positive")));
        }
        let noise = NoiseFactor::new(&noise_cov);
        Ok(Self {
            id,
            observation,
            noise_cov,
            distance,
            noise,
        })
    }

    /// A single-feature agent measuring feature `k` of a `dim`-state plant.
    pub fn scalar(id: AgentId, feature: usize, dim: usize, variance: T, distance: T) -> Result<Self> {
        if feature >= dim {
            return Err(Error::invalid(format!(
                "agent {id}: feature {feature} out of range for dimension {dim}"
            )));
        }
        let mut h = DMatrix::zeros(1, dim);
        h[(0, feature)] = T::one();
        Self::new(id, h, DMatrix::from_element(1, 1, variance), distance)
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn observation_matrix(&self) -> &DMatrix<T> {
        &self.observation
    }

    pub fn noise_cov(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    pub fn distance(&self) -> T {
        self.distance
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.observation.ncols()
    }

    pub fn measures(&self, feature: usize) -> bool {
        feature < self.state_dim()
            && self
                .observation
                .column(feature)
                .iter()
                .any(|v| *v != T::zero())
    }

    /// Scalar used to rank agents by measurement quality: the variance for a
    /// one-dimensional agent, the trace of `C_w` otherwise.
    pub fn error_level(&self) -> T {
        self.noise_cov.trace()
    }

    /// The single feature this agent measures, if it measures exactly one.
    pub fn sole_feature(&self) -> Option<usize> {
        let mut it = (0..self.state_dim()).filter(|&k| self.measures(k));
        match (it.next(), it.next()) {
            (Some(k), None) if self.obs_dim() == 1 => Some(k),
            _ => None,
        }
    }

    fn check_state(&self, state: &StateVector<T>) -> Result<()> {
        if state.dim() != self.state_dim() {
            return Err(Error::invalid(format!(
                "agent {}: expects state dimension {}, got {}",
                self.id,
                self.state_dim(),
                state.dim()
            )));
        }
        Ok(())
    }

    pub fn observe<R: Rng + ?Sized>(
        &self,
        state: &StateVector<T>,
        qi: u64,
        rng: &mut R,
    ) -> Result<Observation<T>> {
        self.check_state(state)?;
        let values = &self.observation * state.as_vector() + self.noise.sample(rng);
        Ok(Observation {
            agent: self.id,
            values,
            qi,
        })
    }

    /// `H s` with the noise switched off. Test and oracle use only.
    pub fn observe_noiseless(&self, state: &StateVector<T>, qi: u64) -> Result<Observation<T>> {
        self.check_state(state)?;
        Ok(Observation {
            agent: self.id,
            values: &self.observation * state.as_vector(),
            qi,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T: Real> {
    pub agent: AgentId,
    pub values: DVector<T>,
    pub qi: u64,
}

/// The set of sensing agents available to the AP.
#[derive(Debug, Clone, Default)]
pub struct Fleet<T: Real> {
    agents: Vec<SensingAgentSpec<T>>,
}

impl<T: Real> Fleet<T> {
    pub fn new(agents: Vec<SensingAgentSpec<T>>) -> Result<Self> {
        let mut ids: Vec<_> = agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate agent id in fleet"));
        }
        if let Some(first) = agents.first() {
            if agents.iter().any(|a| a.state_dim() != first.state_dim()) {
                return Err(Error::invalid("fleet agents disagree on state dimension"));
            }
        }
        Ok(Self { agents })
    }

    pub fn agents(&self) -> &[SensingAgentSpec<T>] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn get(&self, id: AgentId) -> Option<&SensingAgentSpec<T>> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Every agent whose observation matrix has a nonzero entry in column `feature`.
    pub fn agents_measuring(&self, feature: usize) -> Vec<&SensingAgentSpec<T>> {
        self.agents.iter().filter(|a| a.measures(feature)).collect()
    }

    /// True when every feature `0..dim` is measured by some agent.
    pub fn covers(&self, dim: usize) -> bool {
        (0..dim).all(|k| self.agents.iter().any(|a| a.measures(k)))
    }

    pub fn to_records(&self) -> Result<Vec<AgentRecord>> {
        self.agents
            .iter()
            .map(|a| {
                let feature = a.sole_feature().ok_or_else(|| {
                    Error::invalid(format!(
                        "agent {} is not a single-feature agent and has no record form",
                        a.id
                    ))
                })?;
                Ok(AgentRecord {
                    id: a.id,
                    feature,
                    variance: a.noise_cov[(0, 0)].f64(),
                    distance: a.distance.f64(),
                })
            })
            .collect()
    }

    pub fn from_records(records: &[AgentRecord], dim: usize) -> Result<Self> {
        let agents = records
            .iter()
            .map(|r| {
                SensingAgentSpec::scalar(r.id, r.feature, dim, T::lit(r.variance), T::lit(r.distance))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(agents)
    }
}

/// Serialized form of a single-feature agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub id: AgentId,
    pub feature: usize,
    pub variance: f64,
    pub distance: f64,
}

/// Noise variances available to agents measuring one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevels {
    /// Log-uniform on `[min, max]`.
    LogUniform { min: f64, max: f64 },
    /// Uniform choice among the listed variances. An empty list means no
    /// agent measures the feature.
    Choice(Vec<f64>),
}

impl NoiseLevels {
    fn is_empty(&self) -> bool {
        matches!(self, NoiseLevels::Choice(v) if v.is_empty())
    }

    fn validate(&self) -> Result<()> {
        match self {
            NoiseLevels::LogUniform { min, max } if *min > 0.0 && min <= max => Ok(()),
            NoiseLevels::Choice(v) if v.iter().all(|x| *x > 0.0 && x.is_finite()) => Ok(()),
            other => Err(Error::Config(format!("invalid noise levels {other:?}"))),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseLevels::LogUniform { min, max } => {
                if min == max {
                    *min
                } else {
                    rng.random_range(min.ln()..max.ln()).exp()
                }
            }
            NoiseLevels::Choice(v) => v[rng.random_range(0..v.len())],
        }
    }
}

/// Parameters for random fleet placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Placement {
    pub count: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    /// One entry per state feature.
    pub noise: Vec<NoiseLevels>,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            count: 20,
            min_distance: 1.0,
            max_distance: 20.0,
            noise: vec![
                NoiseLevels::LogUniform {
                    min: 1e-3,
                    max: 1e-1,
                },
                NoiseLevels::LogUniform {
                    min: 1e-4,
                    max: 1e-2,
                },
            ],
        }
    }
}

/// Places `placement.count` single-feature agents at random distances in
/// `(min_distance, max_distance]`.
///
/// Features are assigned round-robin over the features that have noise
/// levels, so every such feature gets at least one agent.
pub fn place_agents<T: Real, R: Rng + ?Sized>(placement: &Placement, rng: &mut R) -> Result<Fleet<T>> {
    let dim = placement.noise.len();
    if dim == 0 {
        return Err(Error::Config("fleet placement needs at least one feature".into()));
    }
    for (k, levels) in placement.noise.iter().enumerate() {
        if levels.is_empty() {
            return Err(Error::Config(format!(
                "no agents requested for feature {k}; the fleet cannot cover the state"
            )));
        }
        levels.validate()?;
    }
    if placement.count < dim {
        return Err(Error::Config(format!(
            "{} agents cannot cover {dim} features",
            placement.count
        )));
    }
    let (lo, hi) = (placement.min_distance, placement.max_distance);
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::Config(format!(
            "distance range ({lo}, {hi}] must satisfy 0 < min < max"
        )));
    }
    let mut agents = Vec::with_capacity(placement.count);
    for i in 0..placement.count {
        let feature = i % dim;
        let variance = placement.noise[feature].draw(rng);
        // (lo, hi]: reflect the half-open draw
        let distance = hi - rng.random_range(0.0..(hi - lo));
        agents.push(SensingAgentSpec::scalar(
            i as AgentId + 1,
            feature,
            dim,
            T::lit(variance),
            T::lit(distance),
        )?);
    }
    Fleet::new(agents)
}
