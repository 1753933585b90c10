//! The closed loop run once per QI: predict, act, schedule, fuse, step.
//!
//! [`Twin`] holds everything fixed for an experiment (plant, fleet, channel,
//! caps); [`Episode`] holds the per-episode state and random streams. Both the
//! trainer and the evaluation harness drive episodes through
//! [`Twin::advance`].

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{base_reward, decode_action, shape_reward, CostMode, PolicyInput};
use crate::baselines::{baseline_schedule, BaselineParams, SchedulingMode};
use crate::channel::{self, ChannelParams};
use crate::dynamics::{MountainCar, MountainCarParams, Plant, StateVector};
use crate::error::{Error, Result};
use crate::estimator::{self, Belief};
use crate::scalar::Real;
use crate::scheduler::QosThresholds;
use crate::sensing::{place_agents, AgentId, AgentRecord, Fleet, Observation, Placement};

const STREAM_INIT: u64 = 0;
const STREAM_PLANT: u64 = 1;
const STREAM_SENSING: u64 = 2;
const STREAM_PICK: u64 = 3;
/// First stream free for callers (exploration noise, shuffling).
pub const STREAM_USER: u64 = 16;

/// A ChaCha stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of episode `index` under `master`.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    stream_rng(master, index).next_u64()
}

/// Sensing-agent deployment: explicit records, or a random placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub seed: u64,
    pub placement: Placement,
    pub agents: Option<Vec<AgentRecord>>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            placement: Placement::default(),
            agents: None,
        }
    }
}

impl FleetConfig {
    pub fn build<T: Real>(&self, dim: usize) -> Result<Fleet<T>> {
        let fleet = match &self.agents {
            Some(records) => Fleet::from_records(records, dim)?,
            None => {
                if self.placement.noise.len() != dim {
                    return Err(Error::Config(format!(
                        "placement lists noise levels for {} features, the plant has {dim}",
                        self.placement.noise.len()
                    )));
                }
                place_agents(&self.placement, &mut stream_rng(self.seed, 0))?
            }
        };
        if !fleet.covers(dim) {
            return Err(Error::Config("the fleet does not measure every state feature".into()));
        }
        Ok(fleet)
    }
}

/// Everything that defines the environment an agent is trained and
/// evaluated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub mode: SchedulingMode,
    pub plant: MountainCarParams,
    pub channel: ChannelParams,
    pub fleet: FleetConfig,
    /// DT variance caps `ξ²` per feature.
    pub variance_caps: Vec<f64>,
    /// `C`.
    pub capacity: usize,
    pub traditional_agents: usize,
    pub eta_max: f64,
    /// `κ`.
    pub kappa: f64,
    pub cost_mode: CostMode,
    pub goal_bonus: f64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            mode: SchedulingMode::Reverb,
            plant: MountainCarParams::default(),
            channel: ChannelParams::default(),
            fleet: FleetConfig::default(),
            variance_caps: vec![0.01, 0.001],
            capacity: 10,
            traditional_agents: 2,
            eta_max: 1000.0,
            kappa: 5e-6,
            cost_mode: CostMode::Penalty,
            goal_bonus: 100.0,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.channel.validate()?;
        if self.variance_caps.len() != 2 {
            return Err(Error::Config(format!(
                "expected 2 variance caps (position, velocity), got {}",
                self.variance_caps.len()
            )));
        }
        if self.variance_caps.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config("variance caps must be positive and finite".into()));
        }
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return Err(Error::Config("eta_max must be positive and finite".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config("kappa must be non-negative".into()));
        }
        if !self.goal_bonus.is_finite() {
            return Err(Error::Config("goal bonus must be finite".into()));
        }
        if self.traditional_agents == 0 {
            return Err(Error::Config("traditional mode needs at least one agent".into()));
        }
        Ok(())
    }
}

/// Per-QI trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QiRecord {
    pub qi: u64,
    pub true_position: f64,
    pub true_velocity: f64,
    pub est_position: f64,
    pub est_velocity: f64,
    pub std_position: f64,
    pub std_velocity: f64,
    pub selected: usize,
    pub agents: String,
    pub power_w: f64,
    pub eta_position: f64,
    pub eta_velocity: f64,
    pub control: f64,
    pub reward: f64,
    /// Largest prior variance-to-cap ratio before scheduling.
    pub max_prior_ratio: f64,
    /// All posterior variances within the effective caps.
    pub caps_met: bool,
    /// `‖s_t - ŝ_t‖₂`.
    pub error: f64,
}

/// Result of one QI.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Real> {
    pub reward: T,
    pub done: bool,
    pub reached_goal: bool,
    pub record: QiRecord,
}

/// Per-episode state.
#[derive(Debug, Clone)]
pub struct Episode<T: Real> {
    seed: u64,
    qi: u64,
    truth: StateVector<T>,
    /// What the policy sees before acting: the EKF prior, or the last raw
    /// estimate for the unfiltered mode.
    prior: Belief<T>,
    plant_rng: ChaCha8Rng,
    sensing_rng: ChaCha8Rng,
    pick_rng: ChaCha8Rng,
    done: bool,
    reached_goal: bool,
}

impl<T: Real> Episode<T> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn qi(&self) -> u64 {
        self.qi
    }

    pub fn truth(&self) -> &StateVector<T> {
        &self.truth
    }

    pub fn prior(&self) -> &Belief<T> {
        &self.prior
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reached_goal(&self) -> bool {
        self.reached_goal
    }

    pub fn policy_input(&self) -> PolicyInput<T> {
        PolicyInput {
            mean: self.prior.mean().as_vector().iter().copied().collect(),
            std: self.prior.std_devs(),
        }
    }
}

/// The fixed parts of the closed loop.
#[derive(Debug, Clone)]
pub struct Twin<T: Real> {
    config: TwinConfig,
    plant: MountainCar<T>,
    fleet: Fleet<T>,
    /// Required transmit power per agent, in fleet order.
    powers: Vec<(AgentId, T)>,
    caps: Vec<T>,
}

impl<T: Real> Twin<T> {
    pub fn new(config: TwinConfig) -> Result<Self> {
        config.validate()?;
        let plant = MountainCar::new(config.plant.clone())?;
        let fleet = config.fleet.build::<T>(plant.state_dim())?;
        let powers = fleet
            .agents()
            .iter()
            .map(|a| {
                channel::required_power(a.distance(), &config.channel)
                    .map(|p| (a.id(), p))
                    .map_err(|e| Error::Config(format!("agent {}: {e}", a.id())))
            })
            .collect::<Result<Vec<_>>>()?;
        let caps = config.variance_caps.iter().map(|&c| T::lit(c)).collect();
        Ok(Self {
            config,
            plant,
            fleet,
            powers,
            caps,
        })
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    pub fn mode(&self) -> SchedulingMode {
        self.config.mode
    }

    pub fn plant(&self) -> &MountainCar<T> {
        &self.plant
    }

    pub fn fleet(&self) -> &Fleet<T> {
        &self.fleet
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    /// Length of the raw policy action: controls then one accuracy per feature.
    pub fn action_dim(&self) -> usize {
        self.plant.control_dim() + self.plant.state_dim()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.plant.state_dim()
    }

    pub fn required_power(&self, id: AgentId) -> Option<T> {
        self.powers.iter().find(|(a, _)| *a == id).map(|(_, p)| *p)
    }

    pub fn begin(&self, seed: u64) -> Result<Episode<T>> {
        let truth = self.plant.initial_state(&mut stream_rng(seed, STREAM_INIT));
        let (mean, cov) = self.plant.initial_moments();
        Ok(Episode {
            seed,
            qi: 0,
            truth,
            prior: Belief::new(mean, cov, 0)?,
            plant_rng: stream_rng(seed, STREAM_PLANT),
            sensing_rng: stream_rng(seed, STREAM_SENSING),
            pick_rng: stream_rng(seed, STREAM_PICK),
            done: false,
            reached_goal: false,
        })
    }

    /// Runs one QI with the raw policy output `raw`.
    pub fn advance(&self, ep: &mut Episode<T>, raw: &[T]) -> Result<StepOutcome<T>> {
        if ep.done {
            return Err(Error::invalid("episode already finished"));
        }
        if raw.len() != self.action_dim() {
            return Err(Error::invalid(format!(
                "expected a raw action of length {}, got {}",
                self.action_dim(),
                raw.len()
            )));
        }
        let controls = self.plant.control_dim();
        let action = decode_action(raw, controls, T::lit(self.config.eta_max))?;
        let thresholds = QosThresholds::new(self.caps.clone(), action.accuracy.clone())?;
        let params = BaselineParams {
            capacity: self.config.capacity,
            traditional_agents: self.config.traditional_agents,
        };
        let mode = self.config.mode;
        let decision = baseline_schedule(
            mode,
            &ep.prior,
            &ep.truth,
            &thresholds,
            &self.fleet,
            params,
            &mut ep.pick_rng,
        )?;

        let observations = decision
            .agents(&self.fleet)?
            .iter()
            .map(|a| a.observe(&ep.truth, ep.qi, &mut ep.sensing_rng))
            .collect::<Result<Vec<_>>>()?;
        let posterior = match mode {
            SchedulingMode::Perfect => decision.posterior.clone(),
            SchedulingMode::Traditional => self.raw_estimate(&ep.prior, &observations)?,
            _ => decision.fuse(&ep.prior, &self.fleet, &observations)?,
        };

        let power = decision
            .selected
            .iter()
            .map(|id| self.required_power(*id).expect("selected agents belong to the fleet"))
            .fold(T::zero(), |acc, p| acc + p);
        let error = (ep.truth.as_vector() - posterior.mean().as_vector()).norm();
        let effective = thresholds.effective();
        let caps_met = posterior
            .variances()
            .iter()
            .zip(effective)
            .all(|(v, c)| *v <= *c);

        let next = self.plant.step(&ep.truth, &action.control, &mut ep.plant_rng)?;
        let reached = self.plant.is_goal(&next);
        let reward = shape_reward(
            base_reward(action.control[0], reached, T::lit(self.config.goal_bonus)),
            &action.accuracy,
            T::lit(self.config.kappa),
            self.config.cost_mode,
        );

        let std = posterior.std_devs();
        let record = QiRecord {
            qi: ep.qi,
            true_position: ep.truth.get(0).f64(),
            true_velocity: ep.truth.get(1).f64(),
            est_position: posterior.mean().get(0).f64(),
            est_velocity: posterior.mean().get(1).f64(),
            std_position: std[0].f64(),
            std_velocity: std[1].f64(),
            selected: decision.selected.len(),
            agents: decision
                .selected
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            power_w: power.f64(),
            eta_position: action.accuracy[0].f64(),
            eta_velocity: action.accuracy[1].f64(),
            control: action.control[0].f64(),
            reward: reward.f64(),
            max_prior_ratio: decision
                .prior_ratios
                .iter()
                .map(|r| r.f64())
                .fold(f64::NEG_INFINITY, f64::max),
            caps_met,
            error: error.f64(),
        };

        ep.qi += 1;
        ep.reached_goal = reached;
        ep.done = reached || ep.qi >= self.config.plant.episode_cap;
        ep.prior = if mode.uses_filter() {
            estimator::predict(&posterior, &action.control, &self.plant)?
        } else {
            Belief::new(posterior.mean().clone(), posterior.cov().clone(), ep.qi)?
        };
        ep.truth = next;
        Ok(StepOutcome {
            reward,
            done: ep.done,
            reached_goal: reached,
            record,
        })
    }

    /// Unfiltered estimate: each observed feature is the inverse-variance
    /// weighted mean of its raw readings; unobserved features keep their
    /// previous value.
    fn raw_estimate(&self, previous: &Belief<T>, observations: &[Observation<T>]) -> Result<Belief<T>> {
        let dim = previous.dim();
        let mut info = vec![T::zero(); dim];
        let mut weighted = vec![T::zero(); dim];
        for obs in observations {
            let agent = self
                .fleet
                .get(obs.agent)
                .ok_or_else(|| Error::invalid(format!("agent {} not in fleet", obs.agent)))?;
            let feature = agent
                .sole_feature()
                .ok_or_else(|| Error::invalid("raw estimates need single-feature agents"))?;
            let w = T::one() / agent.error_level();
            info[feature] += w;
            weighted[feature] += w * obs.values[0];
        }
        let mut mean = previous.mean().as_vector().clone();
        let mut var: Vec<T> = previous.variances();
        for k in 0..dim {
            if info[k] > T::zero() {
                mean[k] = weighted[k] / info[k];
                var[k] = T::one() / info[k];
            }
        }
        let cov = DMatrix::from_diagonal(&DVector::from_vec(var));
        Belief::new(StateVector::new(mean), cov, previous.qi())
    }
}
