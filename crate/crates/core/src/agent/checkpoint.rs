//! JSON checkpoints of trained policies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ActorCritic, Mlp, OutputActivation};
use super::ppo::{PpoHyperparams, RunningStats, TrainedPolicy};
use crate::baselines::SchedulingMode;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A named parameter tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: SchedulingMode,
    pub hyperparams: PpoHyperparams,
    pub actor_sizes: Vec<usize>,
    pub critic_sizes: Vec<usize>,
    pub tensors: Vec<Tensor>,
    pub normalizer: RunningStats,
}

fn push_layers<T: Real>(prefix: &str, net: &Mlp<T>, out: &mut Vec<Tensor>) {
    let sizes = net.sizes();
    let p = net.params();
    for l in 0..net.layers() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = net.weight_offset(l);
        let b = net.bias_offset(l);
        out.push(Tensor {
            name: format!("{prefix}.{l}.weight"),
            shape: vec![n_out, n_in],
            data: p[w..w + n_in * n_out].iter().map(|x| x.f64()).collect(),
        });
        out.push(Tensor {
            name: format!("{prefix}.{l}.bias"),
            shape: vec![n_out],
            data: p[b..b + n_out].iter().map(|x| x.f64()).collect(),
        });
    }
}

impl Checkpoint {
    pub fn from_policy<T: Real>(policy: &TrainedPolicy<T>) -> Self {
        let mut tensors = Vec::new();
        push_layers("actor", &policy.model.actor, &mut tensors);
        tensors.push(Tensor {
            name: "actor.log_std".into(),
            shape: vec![policy.model.log_std.len()],
            data: policy.model.log_std.iter().map(|x| x.f64()).collect(),
        });
        push_layers("critic", &policy.model.critic, &mut tensors);
        Self {
            version: CHECKPOINT_VERSION,
            mode: policy.mode,
            hyperparams: policy.hyper.clone(),
            actor_sizes: policy.model.actor.sizes().to_vec(),
            critic_sizes: policy.model.critic.sizes().to_vec(),
            tensors,
            normalizer: policy.normalizer.clone(),
        }
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "tensor {name} has shape {:?} with {} values, expected {shape:?}",
                t.shape,
                t.data.len()
            )));
        }
        Ok(t)
    }

    fn network<T: Real>(&self, prefix: &str, sizes: &[usize], output: OutputActivation) -> Result<Mlp<T>> {
        let mut params = Vec::new();
        for l in 0..sizes.len().saturating_sub(1) {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            params.extend(self.tensor(&format!("{prefix}.{l}.weight"), &[n_out, n_in])?.data.iter().map(|&x| T::lit(x)));
            params.extend(self.tensor(&format!("{prefix}.{l}.bias"), &[n_out])?.data.iter().map(|&x| T::lit(x)));
        }
        Mlp::from_params(sizes, output, params)
    }

    pub fn to_policy<T: Real>(&self) -> Result<TrainedPolicy<T>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let actor = self.network("actor", &self.actor_sizes, OutputActivation::Tanh)?;
        let critic = self.network("critic", &self.critic_sizes, OutputActivation::Identity)?;
        let log_std = self
            .tensor("actor.log_std", &[actor.output_dim()])?
            .data
            .iter()
            .map(|&x| T::lit(x))
            .collect();
        let model = ActorCritic::new(actor, log_std, critic)?;
        if self.normalizer.mean.len() != model.input_dim() || self.normalizer.var.len() != model.input_dim() {
            return Err(Error::invalid("normalizer size does not match the network input"));
        }
        Ok(TrainedPolicy {
            mode: self.mode,
            model,
            normalizer: self.normalizer.clone(),
            hyper: self.hyperparams.clone(),
            curve: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization {
            path: path.into(),
            reason: e.to_string(),
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}
