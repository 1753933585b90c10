//! Plant models: the nonlinear system the digital twin tracks and controls.
//!
//! The [`Plant`] trait is what the estimator linearizes and what the closed
//! loop advances. [`MountainCar`] is the continuous mountain-car system used
//! in every experiment; [`LinearPlant`] is a linear-Gaussian system kept for
//! filter verification against batch least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::NoiseFactor;
use crate::scalar::Real;

/// True plant state `s_t`, or a belief mean over it.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Real>(DVector<T>);

impl<T: Real> StateVector<T> {
    pub fn new(values: DVector<T>) -> Self {
        Self(values)
    }

    pub fn from_slice(values: &[T]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<T> {
        self.0
    }

    pub fn get(&self, k: usize) -> T {
        self.0[k]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite_real())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.f64()).collect()
    }
}

impl<T: Real> From<DVector<T>> for StateVector<T> {
    fn from(v: DVector<T>) -> Self {
        Self(v)
    }
}

/// A discrete-time controlled plant `s_t = f(s_{t-1}, a_{t-1}) + u_t`.
///
/// `transition` is the noise-free map including any saturation, and
/// `jacobian` is its derivative with respect to the state at a fixed control.
pub trait Plant<T: Real>: Send + Sync {
    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    fn transition(&self, state: &StateVector<T>, control: &[T]) -> Result<StateVector<T>>;

    fn jacobian(&self, state: &StateVector<T>, control: &[T]) -> Result<DMatrix<T>>;

    /// Process-noise covariance `C_u`.
    fn process_noise(&self) -> &DMatrix<T>;

    /// Advances the true plant one QI, drawing process noise from `rng`.
    fn step<R: Rng + ?Sized>(
        &self,
        state: &StateVector<T>,
        control: &[T],
        rng: &mut R,
    ) -> Result<StateVector<T>>
    where
        Self: Sized;

    fn is_goal(&self, _state: &StateVector<T>) -> bool {
        false
    }
}

fn check_finite<T: Real>(state: &StateVector<T>, control: &[T]) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::invalid("non-finite state"));
    }
    if control.iter().any(|c| !c.is_finite_real()) {
        return Err(Error::invalid("non-finite control"));
    }
    Ok(())
}

/// Constants of the continuous mountain car.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MountainCarParams {
    /// Gravity term multiplying `cos(3x)`.
    pub gravity: f64,
    /// Force gain applied to the control.
    pub force_gain: f64,
    pub goal_position: f64,
    pub min_position: f64,
    pub max_position: f64,
    pub max_speed: f64,
    /// Initial position is uniform on this interval, initial velocity is zero.
    pub init_position: (f64, f64),
    /// Process-noise standard deviations for (position, velocity).
    pub process_noise_std: (f64, f64),
    pub episode_cap: u64,
}

impl Default for MountainCarParams {
    fn default() -> Self {
        Self {
            gravity: 0.0025,
            force_gain: 0.0015,
            goal_position: 0.45,
            min_position: -1.2,
            max_position: 0.6,
            max_speed: 0.07,
            init_position: (-0.6, -0.4),
            process_noise_std: (1e-4, 1e-5),
            episode_cap: 999,
        }
    }
}

impl MountainCarParams {
    pub fn noiseless(mut self) -> Self {
        self.process_noise_std = (0.0, 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gravity > 0.0 && self.force_gain > 0.0) {
            return Err(Error::Config(
                "mountain car gravity and force gain must be positive".into(),
            ));
        }
        if !(self.min_position < self.goal_position && self.goal_position <= self.max_position) {
            return Err(Error::Config("goal position outside the track".into()));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::Config("max speed must be positive".into()));
        }
        let (lo, hi) = self.init_position;
        if !(self.min_position <= lo && lo <= hi && hi <= self.max_position) {
            return Err(Error::Config("initial position range outside the track".into()));
        }
        let (sp, sv) = self.process_noise_std;
        if !(sp >= 0.0 && sv >= 0.0) {
            return Err(Error::Config("process noise must be non-negative".into()));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Continuous mountain car with state `(position, velocity)` and a scalar force.
///
/// One QI updates velocity first, then position with the new velocity, then
/// clamps both; hitting the left wall while moving left zeroes the velocity.
#[derive(Debug, Clone)]
pub struct MountainCar<T: Real> {
    params: MountainCarParams,
    gravity: T,
    force_gain: T,
    goal: T,
    min_pos: T,
    max_pos: T,
    max_speed: T,
    noise_cov: DMatrix<T>,
    noise_std: (T, T),
}

/// Which saturations were active on a transition; the Jacobian rows vanish
/// where the map is clamped.
struct Saturation {
    velocity: bool,
    position: bool,
    wall: bool,
}

impl<T: Real> MountainCar<T> {
    pub fn new(params: MountainCarParams) -> Result<Self> {
        params.validate()?;
        let (sp, sv) = params.process_noise_std;
        let noise_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            T::lit(sp * sp),
            T::lit(sv * sv),
        ]));
        Ok(Self {
            gravity: T::lit(params.gravity),
            force_gain: T::lit(params.force_gain),
            goal: T::lit(params.goal_position),
            min_pos: T::lit(params.min_position),
            max_pos: T::lit(params.max_position),
            max_speed: T::lit(params.max_speed),
            noise_std: (T::lit(sp), T::lit(sv)),
            noise_cov,
            params,
        })
    }

    pub fn params(&self) -> &MountainCarParams {
        &self.params
    }

    /// Samples an initial state: uniform position, zero velocity.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector<T> {
        let (lo, hi) = self.params.init_position;
        let x = if hi > lo { rng.random_range(lo..hi) } else { lo };
        StateVector::from_slice(&[T::lit(x), T::zero()])
    }

    /// Moments of the initial-state distribution.
    pub fn initial_moments(&self) -> (StateVector<T>, DMatrix<T>) {
        let (lo, hi) = self.params.init_position;
        let mean = StateVector::from_slice(&[T::lit(0.5 * (lo + hi)), T::zero()]);
        let width = hi - lo;
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            T::lit(width * width / 12.0),
            T::lit(1e-4),
        ]));
        (mean, cov)
    }

    fn control_of(&self, control: &[T]) -> Result<T> {
        match control.first() {
            Some(c) => Ok(c.clamp(-T::one(), T::one())),
            None => Err(Error::invalid("mountain car needs one control input")),
        }
    }

    /// The update with explicit additive noise `(u_pos, u_vel)`.
    fn advance(&self, x: T, v: T, force: T, noise: (T, T)) -> (T, T, Saturation) {
        let three = T::lit(3.0);
        let v_raw = v + self.force_gain * force - self.gravity * (three * x).cos() + noise.1;
        let v_sat = v_raw.clamp(-self.max_speed, self.max_speed);
        let x_raw = x + v_sat + noise.0;
        let x_new = x_raw.clamp(self.min_pos, self.max_pos);
        let wall = x_new == self.min_pos && v_sat < T::zero();
        let v_new = if wall { T::zero() } else { v_sat };
        let sat = Saturation {
            velocity: v_raw != v_sat,
            position: x_raw != x_new,
            wall,
        };
        (x_new, v_new, sat)
    }

    fn check_dim(&self, state: &StateVector<T>) -> Result<()> {
        if state.dim() != 2 {
            return Err(Error::invalid(format!(
                "mountain car state has dimension 2, got {}",
                state.dim()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Plant<T> for MountainCar<T> {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn transition(&self, state: &StateVector<T>, control: &[T]) -> Result<StateVector<T>> {
        check_finite(state, control)?;
        self.check_dim(state)?;
        let force = self.control_of(control)?;
        let (x, v, _) = self.advance(state.get(0), state.get(1), force, (T::zero(), T::zero()));
        Ok(StateVector::from_slice(&[x, v]))
    }

    fn jacobian(&self, state: &StateVector<T>, control: &[T]) -> Result<DMatrix<T>> {
        check_finite(state, control)?;
        self.check_dim(state)?;
        let force = self.control_of(control)?;
        let x = state.get(0);
        let (_, _, sat) = self.advance(x, state.get(1), force, (T::zero(), T::zero()));
        // d v'/d(x, v) before saturation
        let dv_dx = T::lit(3.0) * self.gravity * (T::lit(3.0) * x).sin();
        let (dv_dx, dv_dv) = if sat.velocity {
            (T::zero(), T::zero())
        } else {
            (dv_dx, T::one())
        };
        let (dx_dx, dx_dv) = if sat.position {
            (T::zero(), T::zero())
        } else {
            (T::one() + dv_dx, dv_dv)
        };
        let (dv_dx, dv_dv) = if sat.wall {
            (T::zero(), T::zero())
        } else {
            (dv_dx, dv_dv)
        };
        Ok(DMatrix::from_row_slice(2, 2, &[dx_dx, dx_dv, dv_dx, dv_dv]))
    }

    fn process_noise(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &StateVector<T>,
        control: &[T],
        rng: &mut R,
    ) -> Result<StateVector<T>> {
        check_finite(state, control)?;
        self.check_dim(state)?;
        let force = self.control_of(control)?;
        // Both draws are always taken so the stream position does not depend
        // on the configured noise level.
        let zp: f64 = rng.sample(rand_distr::StandardNormal);
        let zv: f64 = rng.sample(rand_distr::StandardNormal);
        let noise = (self.noise_std.0 * T::lit(zp), self.noise_std.1 * T::lit(zv));
        let (x, v, _) = self.advance(state.get(0), state.get(1), force, noise);
        Ok(StateVector::from_slice(&[x, v]))
    }

    fn is_goal(&self, state: &StateVector<T>) -> bool {
        state.get(0) >= self.goal
    }
}

/// Linear-Gaussian plant `s_t = A s_{t-1} + B a_{t-1} + u_t`.
#[derive(Debug, Clone)]
pub struct LinearPlant<T: Real> {
    transition: DMatrix<T>,
    input: DMatrix<T>,
    noise_cov: DMatrix<T>,
    noise: NoiseFactor<T>,
}

impl<T: Real> LinearPlant<T> {
    pub fn new(transition: DMatrix<T>, input: DMatrix<T>, noise_cov: DMatrix<T>) -> Result<Self> {
        let k = transition.nrows();
        if !transition.is_square() || input.nrows() != k || noise_cov.shape() != (k, k) {
            return Err(Error::invalid("inconsistent linear plant dimensions"));
        }
        if (&noise_cov - noise_cov.transpose()).abs().max() > T::lit(1e-12) {
            return Err(Error::invalid("process noise covariance is not symmetric"));
        }
        let noise = NoiseFactor::new(&noise_cov);
        Ok(Self {
            transition,
            input,
            noise_cov,
            noise,
        })
    }

    pub fn transition_matrix(&self) -> &DMatrix<T> {
        &self.transition
    }

    pub fn input_matrix(&self) -> &DMatrix<T> {
        &self.input
    }

    fn check(&self, state: &StateVector<T>, control: &[T]) -> Result<()> {
        check_finite(state, control)?;
        if state.dim() != self.transition.nrows() || control.len() != self.input.ncols() {
            return Err(Error::invalid("state or control dimension mismatch"));
        }
        Ok(())
    }
}

impl<T: Real> Plant<T> for LinearPlant<T> {
    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    fn transition(&self, state: &StateVector<T>, control: &[T]) -> Result<StateVector<T>> {
        self.check(state, control)?;
        let a = DVector::from_column_slice(control);
        Ok((&self.transition * state.as_vector() + &self.input * a).into())
    }

    fn jacobian(&self, state: &StateVector<T>, control: &[T]) -> Result<DMatrix<T>> {
        self.check(state, control)?;
        Ok(self.transition.clone())
    }

    fn process_noise(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &StateVector<T>,
        control: &[T],
        rng: &mut R,
    ) -> Result<StateVector<T>> {
        let next = self.transition(state, control)?;
        Ok((next.into_vector() + self.noise.sample(rng)).into())
    }
}
