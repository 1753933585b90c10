//! Proximal policy optimization with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{gaussian_log_prob, ActorCritic};
use super::{Policy, PolicyInput};
use crate::baselines::SchedulingMode;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::twin::{episode_seed, stream_rng, Twin, TwinConfig, STREAM_USER};

/// Episode-seed offset keeping training episodes apart from evaluation ones.
const TRAINING_EPISODES: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyperparams {
    /// Adam step size for both networks.
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    /// QIs collected per update.
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub hidden: Vec<usize>,
    /// Training length in QIs; rounded up to whole batches.
    pub total_steps: u64,
    pub init_log_std: f64,
    /// Global gradient-norm clip per network.
    pub max_grad_norm: f64,
    /// Multiplies rewards before advantage estimation.
    pub reward_scale: f64,
    /// Exploration noise is redrawn every `noise_hold` QIs and held in between.
    pub noise_hold: usize,
    /// Normalized features are clipped to `±obs_clip`.
    pub obs_clip: f64,
    /// An update stops early once a minibatch's KL from the rollout policy
    /// exceeds 1.5× this value. `None` runs every epoch.
    pub target_kl: Option<f64>,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 10,
            batch_size: 2048,
            minibatch_size: 64,
            entropy_coef: 0.005,
            value_coef: 0.5,
            hidden: vec![64, 64],
            total_steps: 150_000,
            init_log_std: 0.0,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            noise_hold: 8,
            obs_clip: 10.0,
            target_kl: Some(0.02),
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("PPO hyperparameters: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("GAE lambda must lie in [0, 1]");
        }
        if !(self.clip_ratio > 0.0) {
            return fail("clip ratio must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.batch_size == 0 || self.minibatch_size == 0 || self.epochs == 0 || self.noise_hold == 0 {
            return fail("batch, minibatch, epoch and noise-hold counts must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive");
        }
        if !(self.reward_scale > 0.0 && self.max_grad_norm > 0.0 && self.obs_clip > 0.0) {
            return fail("reward scale, gradient clip and observation clip must be positive");
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef > 0.0) {
            return fail("entropy coefficient must be non-negative and value coefficient positive");
        }
        if self.target_kl.is_some_and(|k| !(k > 0.0)) {
            return fail("target KL must be positive");
        }
        Ok(())
    }

    pub fn iterations(&self) -> u64 {
        self.total_steps.div_ceil(self.batch_size as u64)
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Running per-feature mean and variance for input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningStats {
    pub fn new(dim: usize, clip: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
            clip,
        }
    }

    pub fn update<T: Real>(&mut self, x: &[T]) {
        let n = self.count + 1.0;
        for ((m, v), xi) in self.mean.iter_mut().zip(&mut self.var).zip(x) {
            let d = xi.f64() - *m;
            let new_mean = *m + d / n;
            *v = (*v * self.count + d * d * self.count / n) / n;
            *m = new_mean;
        }
        self.count = n;
    }

    pub fn normalize<T: Real>(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((xi, m), v)| T::lit(((xi.f64() - m) / (v + 1e-8).sqrt()).clamp(-self.clip, self.clip)))
            .collect()
    }
}

/// One collected QI.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T: Real> {
    /// Normalized policy features.
    pub features: Vec<T>,
    /// Raw (unclamped) sampled action.
    pub action: Vec<T>,
    pub log_prob: T,
    pub value: T,
    /// Scaled reward.
    pub reward: T,
    /// The episode ended after this QI.
    pub done: bool,
    /// Value of the next state when the episode was cut off by the cap.
    pub bootstrap: T,
}

/// Advantages and value targets by generalized advantage estimation.
///
/// `last_value` is the value of the state following the final transition if
/// that transition did not end its episode.
pub fn gae<T: Real>(batch: &[Transition<T>], last_value: T, gamma: T, lambda: T) -> (Vec<T>, Vec<T>) {
    let n = batch.len();
    let mut adv = vec![T::zero(); n];
    let mut next_adv = T::zero();
    for t in (0..n).rev() {
        let tr = &batch[t];
        let (next_value, carry) = if tr.done {
            (tr.bootstrap, T::zero())
        } else if t + 1 < n {
            (batch[t + 1].value, next_adv)
        } else {
            (last_value, T::zero())
        };
        let delta = tr.reward + gamma * next_value - tr.value;
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(batch).map(|(&a, tr)| a + tr.value).collect();
    (adv, returns)
}

/// Losses of one update, averaged over minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Adam state for the three parameter groups.
#[derive(Debug, Clone)]
pub struct Optimizers<T: Real> {
    pub actor: Adam<T>,
    pub log_std: Adam<T>,
    pub critic: Adam<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(model: &ActorCritic<T>, lr: f64) -> Self {
        Self {
            actor: Adam::new(model.actor.params().len(), lr),
            log_std: Adam::new(model.log_std.len(), lr),
            critic: Adam::new(model.critic.params().len(), lr),
        }
    }
}

struct Gradients<T: Real> {
    actor: Vec<T>,
    log_std: Vec<T>,
    critic: Vec<T>,
    policy_loss: T,
    value_loss: T,
    kl: T,
    clipped: usize,
}

/// Gradient of the clipped surrogate, value and entropy losses over `idx`.
fn minibatch_gradients<T: Real>(
    model: &ActorCritic<T>,
    batch: &[Transition<T>],
    advantages: &[T],
    returns: &[T],
    idx: &[usize],
    hyper: &PpoHyperparams,
) -> Result<Gradients<T>> {
    let n = T::from_usize(idx.len()).unwrap();
    let clip = T::lit(hyper.clip_ratio);
    let (lo, hi) = (T::one() - clip, T::one() + clip);
    let value_coef = T::lit(hyper.value_coef);
    let std: Vec<T> = model.log_std.iter().map(|s| s.exp()).collect();
    let mut g = Gradients {
        actor: vec![T::zero(); model.actor.params().len()],
        log_std: vec![T::zero(); model.log_std.len()],
        critic: vec![T::zero(); model.critic.params().len()],
        policy_loss: T::zero(),
        value_loss: T::zero(),
        kl: T::zero(),
        clipped: 0,
    };
    let mut dmean = vec![T::zero(); model.action_dim()];
    for &i in idx {
        let tr = &batch[i];
        let acts = model.actor.forward_trace(&tr.features)?;
        let mean = acts.last().unwrap();
        let log_prob = gaussian_log_prob(&tr.action, mean, &model.log_std);
        let log_ratio = log_prob - tr.log_prob;
        let ratio = log_ratio.exp();
        let a = advantages[i];
        let surr1 = ratio * a;
        let surr2 = ratio.clamp(lo, hi) * a;
        g.policy_loss -= surr1.min(surr2) / n;
        g.kl += (ratio - T::one() - log_ratio) / n;
        if ratio < lo || ratio > hi {
            g.clipped += 1;
        }
        if surr1 <= surr2 {
            let dlogp = -a * ratio / n;
            for j in 0..dmean.len() {
                let z = (tr.action[j] - mean[j]) / std[j];
                dmean[j] = dlogp * z / std[j];
                g.log_std[j] += dlogp * (z * z - T::one());
            }
            model.actor.backward(&acts, &dmean, &mut g.actor);
        }

        let vacts = model.critic.forward_trace(&tr.features)?;
        let err = vacts.last().unwrap()[0] - returns[i];
        g.value_loss += T::lit(0.5) * err * err / n;
        model.critic.backward(&vacts, &[value_coef * err / n], &mut g.critic);
    }
    let ent = T::lit(hyper.entropy_coef);
    for s in &mut g.log_std {
        *s -= ent;
    }
    Ok(g)
}

fn clip_norm<T: Real>(groups: &mut [&mut [T]], max_norm: T) {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in groups.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
}

/// Several epochs of minibatch PPO steps on one batch.
///
/// Advantages are standardized over the batch first.
pub fn ppo_update<T: Real, R: Rng + ?Sized>(
    model: &mut ActorCritic<T>,
    opt: &mut Optimizers<T>,
    batch: &[Transition<T>],
    advantages: &[T],
    returns: &[T],
    hyper: &PpoHyperparams,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() || advantages.len() != batch.len() || returns.len() != batch.len() {
        return Err(Error::invalid("batch, advantages and returns must be non-empty and equal length"));
    }
    let n = batch.len() as f64;
    let mean = advantages.iter().map(|a| a.f64()).sum::<f64>() / n;
    let sd = (advantages.iter().map(|a| (a.f64() - mean).powi(2)).sum::<f64>() / n).sqrt();
    let adv: Vec<T> = advantages.iter().map(|a| T::lit((a.f64() - mean) / (sd + 1e-8))).collect();

    let mut order: Vec<usize> = (0..batch.len()).collect();
    let max_norm = T::lit(hyper.max_grad_norm);
    let mut stats = UpdateStats::default();
    let mut minibatches = 0usize;
    let kl_stop = hyper.target_kl.map(|k| 1.5 * k);
    'epochs: for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(hyper.minibatch_size) {
            let mut g = minibatch_gradients(model, batch, &adv, returns, idx, hyper)?;
            let losses = [g.policy_loss.f64(), g.value_loss.f64(), g.kl.f64()];
            let grads_finite = g.actor.iter().chain(&g.log_std).chain(&g.critic).all(|x| x.is_finite_real());
            if losses.iter().any(|l| !l.is_finite()) || !grads_finite {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {epoch}: policy {}, value {}, kl {}, log_std {:?}",
                    losses[0],
                    losses[1],
                    losses[2],
                    model.log_std.iter().map(|s| s.f64()).collect::<Vec<_>>()
                )));
            }
            if minibatches > 0 && kl_stop.is_some_and(|k| losses[2] > k) {
                break 'epochs;
            }
            clip_norm(&mut [&mut g.actor, &mut g.log_std], max_norm);
            clip_norm(&mut [&mut g.critic], max_norm);
            opt.actor.step(model.actor.params_mut(), &g.actor);
            opt.log_std.step(&mut model.log_std, &g.log_std);
            opt.critic.step(model.critic.params_mut(), &g.critic);

            stats.policy_loss += losses[0];
            stats.value_loss += losses[1];
            stats.approx_kl += losses[2];
            stats.clip_fraction += g.clipped as f64 / idx.len() as f64;
            minibatches += 1;
        }
    }
    let m = minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    stats.entropy = model.entropy().f64();
    Ok(stats)
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub steps: u64,
    pub episodes: u64,
    pub mean_return: Option<f64>,
    pub mean_length: Option<f64>,
    pub success_rate: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// A policy with its input normalization, ready for evaluation.
#[derive(Debug, Clone)]
pub struct TrainedPolicy<T: Real> {
    pub mode: SchedulingMode,
    pub model: ActorCritic<T>,
    pub normalizer: RunningStats,
    pub hyper: PpoHyperparams,
    pub curve: Vec<CurvePoint>,
}

impl<T: Real> TrainedPolicy<T> {
    /// Mean action for `input`.
    pub fn mean_action(&self, input: &PolicyInput<T>) -> Result<Vec<T>> {
        let x = self.normalizer.normalize(&input.to_features());
        self.model.actor.forward(&x)
    }
}

impl<T: Real> Policy<T> for TrainedPolicy<T> {
    fn act(&self, input: &PolicyInput<T>) -> Result<Vec<T>> {
        self.mean_action(input)
    }
}

/// Trains a policy for `config.mode` from `seed`.
///
/// Runs `hyper.iterations()` rounds of collecting `batch_size` QIs of the
/// full closed loop followed by [`ppo_update`]. Output depends only on the
/// arguments.
pub fn train<T: Real>(config: &TwinConfig, hyper: &PpoHyperparams, seed: u64) -> Result<TrainedPolicy<T>> {
    hyper.validate()?;
    let twin = Twin::<T>::new(config.clone())?;
    let feature_dim = twin.feature_dim();
    let action_dim = twin.action_dim();
    let mut model = ActorCritic::random(
        feature_dim,
        action_dim,
        &hyper.hidden,
        hyper.init_log_std,
        &mut stream_rng(seed, STREAM_USER),
    )?;
    let mut noise_rng = stream_rng(seed, STREAM_USER + 1);
    let mut shuffle_rng = stream_rng(seed, STREAM_USER + 2);
    let mut normalizer = RunningStats::new(feature_dim, hyper.obs_clip);
    let mut opt = Optimizers::new(&model, hyper.learning_rate);
    let (gamma, lambda) = (T::lit(hyper.gamma), T::lit(hyper.gae_lambda));
    let scale = T::lit(hyper.reward_scale);

    let mut episode_index = 0u64;
    let mut ep = twin.begin(episode_seed(seed, TRAINING_EPISODES + episode_index))?;
    let mut ep_return = 0.0;
    let mut noise = vec![T::zero(); action_dim];
    let mut curve = Vec::new();
    let mut steps = 0u64;

    for iteration in 0..hyper.iterations() {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        let (mut returns_sum, mut length_sum, mut successes, mut finished) = (0.0, 0.0, 0u64, 0u64);
        for _ in 0..hyper.batch_size {
            let raw = ep.policy_input().to_features();
            normalizer.update(&raw);
            let features = normalizer.normalize(&raw);
            let out = model.forward(&features)?;
            if ep.qi() % hyper.noise_hold as u64 == 0 {
                for z in &mut noise {
                    *z = T::lit(noise_rng.sample(StandardNormal));
                }
            }
            let action: Vec<T> = out
                .mean
                .iter()
                .zip(&out.std)
                .zip(&noise)
                .map(|((&m, &s), &z)| m + s * z)
                .collect();
            let log_prob = gaussian_log_prob(&action, &out.mean, &model.log_std);
            let outcome = twin.advance(&mut ep, &action)?;
            ep_return += outcome.reward.f64();
            let bootstrap = if outcome.done && !outcome.reached_goal {
                model.value(&normalizer.normalize(&ep.policy_input().to_features()))?
            } else {
                T::zero()
            };
            batch.push(Transition {
                features,
                action,
                log_prob,
                value: out.value,
                reward: outcome.reward * scale,
                done: outcome.done,
                bootstrap,
            });
            steps += 1;
            if outcome.done {
                finished += 1;
                returns_sum += ep_return;
                length_sum += ep.qi() as f64;
                successes += outcome.reached_goal as u64;
                ep_return = 0.0;
                episode_index += 1;
                ep = twin.begin(episode_seed(seed, TRAINING_EPISODES + episode_index))?;
            }
        }
        let last_value = model.value(&normalizer.normalize(&ep.policy_input().to_features()))?;
        let (adv, targets) = gae(&batch, last_value, gamma, lambda);
        let stats = ppo_update(&mut model, &mut opt, &batch, &adv, &targets, hyper, &mut shuffle_rng)?;
        let per_episode = |x: f64| (finished > 0).then(|| x / finished as f64);
        curve.push(CurvePoint {
            iteration,
            steps,
            episodes: finished,
            mean_return: per_episode(returns_sum),
            mean_length: per_episode(length_sum),
            success_rate: per_episode(successes as f64),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
        });
    }

    Ok(TrainedPolicy {
        mode: config.mode,
        model,
        normalizer,
        hyper: hyper.clone(),
        curve,
    })
}
