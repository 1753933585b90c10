//! Feed-forward networks with hand-written backpropagation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Fully connected network with tanh hidden layers.
///
/// Parameters live in one flat vector; layer `l` stores its weights row-major
/// as `[out][in]` followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    sizes: Vec<usize>,
    params: Vec<T>,
    output: OutputActivation,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); n],
            output,
        })
    }

    /// Gaussian weights with variance `1/fan_in`, scaled by `output_gain` on
    /// the last layer; zero biases.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        let layers = net.layers();
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let scale = gain / (fan_in as f64).sqrt();
            let w = net.weight_offset(l);
            for p in &mut net.params[w..w + fan_in * fan_out] {
                let z: f64 = rng.sample(StandardNormal);
                *p = T::lit(scale * z);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], output: OutputActivation, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "network {sizes:?} needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn weight_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn bias_offset(&self, layer: usize) -> usize {
        self.weight_offset(layer) + self.sizes[layer] * self.sizes[layer + 1]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    /// Activations of every layer, input first.
    pub fn forward_trace(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[self.weight_offset(l)..];
            let b = &self.params[self.bias_offset(l)..];
            let input = &acts[l];
            let squash = l + 1 < layers || self.output == OutputActivation::Tanh;
            let out: Vec<T> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(input).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi);
                    if squash {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(acts)
    }

    /// Accumulates `∂(dout · y)/∂θ` into `grad`, given the activations from
    /// [`Mlp::forward_trace`].
    pub fn backward(&self, acts: &[Vec<T>], dout: &[T], grad: &mut [T]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.layers();
        let one = T::one();
        let mut delta: Vec<T> = if self.output == OutputActivation::Tanh {
            dout.iter().zip(&acts[layers]).map(|(&d, &a)| d * (one - a * a)).collect()
        } else {
            dout.to_vec()
        };
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = (self.weight_offset(l), self.bias_offset(l));
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, &xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
                grad[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_off..w_off + n_in * n_out];
            let mut prev = vec![T::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                for (p, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                *p *= one - a * a;
            }
            delta = prev;
        }
    }
}

/// Policy head output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T: Real> {
    /// Mean of the raw action, in `(-1, 1)`.
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub value: T,
}

/// Diagonal-Gaussian actor with a state-independent log standard deviation,
/// plus a separate value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<T: Real> {
    pub actor: Mlp<T>,
    pub log_std: Vec<T>,
    pub critic: Mlp<T>,
}

impl<T: Real> ActorCritic<T> {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = |out: usize| {
            let mut s = vec![input_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let actor = Mlp::random(&sizes(action_dim), OutputActivation::Tanh, 0.01, rng)?;
        let critic = Mlp::random(&sizes(1), OutputActivation::Identity, 1.0, rng)?;
        Ok(Self {
            actor,
            log_std: vec![T::lit(init_log_std); action_dim],
            critic,
        })
    }

    pub fn new(actor: Mlp<T>, log_std: Vec<T>, critic: Mlp<T>) -> Result<Self> {
        if actor.output_activation() != OutputActivation::Tanh
            || critic.output_activation() != OutputActivation::Identity
        {
            return Err(Error::invalid("actor must end in tanh and critic must be linear"));
        }
        if actor.output_dim() != log_std.len() || critic.output_dim() != 1 {
            return Err(Error::invalid("actor/critic output shapes are inconsistent"));
        }
        if actor.input_dim() != critic.input_dim() {
            return Err(Error::invalid("actor and critic disagree on input size"));
        }
        Ok(Self { actor, log_std, critic })
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn forward(&self, input: &[T]) -> Result<PolicyOutput<T>> {
        let mean = self.actor.forward(input)?;
        let value = self.critic.forward(input)?[0];
        Ok(PolicyOutput {
            mean,
            std: self.log_std.iter().map(|s| s.exp()).collect(),
            value,
        })
    }

    pub fn value(&self, input: &[T]) -> Result<T> {
        Ok(self.critic.forward(input)?[0])
    }

    /// Entropy of the action distribution.
    pub fn entropy(&self) -> T {
        let c = T::lit(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
        self.log_std.iter().fold(T::zero(), |acc, &s| acc + s + c)
    }
}

/// `log N(action; mean, diag(exp(log_std))²)`.
pub fn gaussian_log_prob<T: Real>(action: &[T], mean: &[T], log_std: &[T]) -> T {
    let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .fold(T::zero(), |acc, ((&a, &m), &s)| {
            let z = (a - m) / s.exp();
            acc - T::lit(0.5) * z * z - s - half_log_2pi
        })
}
