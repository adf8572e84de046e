//! Training loops for the diffusion agent and the DQN baseline.

mod diffql;
mod dqn;
mod replay;

use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::env::{ActionVector, EnvConfig, EnvError, SlicingEnv};
use crate::model::NetworkConfig;
use crate::nn::{DenseNet, Gradients, NnError};

pub use diffql::{
    critic_update, policy_gradient, policy_update, td_target, train, CriticPair, DiffQlAgent, PolicyLoss, TargetGuide,
    TrainConfig, TrainOutcome,
};
pub use dqn::{dqn_baseline, Choice, DqnAgent, DqnConfig, DqnOutcome, SlotTransition, POWER_FRACTIONS};
pub use replay::{stack, Batch, ReplayBuffer, Transition};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid {key}: {reason}")]
    Config { key: &'static str, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One row of a learning curve. Losses are `None` before learning starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mean_reward: f64,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub episodes: Vec<EpisodeRecord>,
}

impl LearningCurve {
    pub const HEADER: &'static str = "episode,mean_reward,critic_loss,policy_loss";

    /// Mean of the last `n` episode rewards (all of them if fewer).
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.episodes[self.episodes.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.mean_reward).sum::<f64>() / tail.len() as f64)
    }

    /// CSV rows with an optional leading constant column (e.g. a config hash).
    pub fn write_csv<W: Write>(&self, mut w: W, prefix: Option<(&str, &str)>) -> io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        match prefix {
            Some((name, _)) => writeln!(w, "{name},{}", Self::HEADER)?,
            None => writeln!(w, "{}", Self::HEADER)?,
        }
        for e in &self.episodes {
            if let Some((_, value)) = prefix {
                write!(w, "{value},")?;
            }
            writeln!(
                w,
                "{},{:.17e},{},{}",
                e.episode,
                e.mean_reward,
                opt(e.critic_loss),
                opt(e.policy_loss)
            )?;
        }
        Ok(())
    }
}

/// Running mean that reports `None` when empty.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    pub(crate) fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub(crate) fn get(self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Episode seed for training episode `ep` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, ep: usize) -> u64 {
    crate::derive_seed(seed, 1_000_000 + ep as u64)
}

/// Mean per-step reward of uniformly random actions, per episode.
pub fn random_policy_rewards(
    network: &NetworkConfig,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, AgentError> {
    let mut env = SlicingEnv::new(network.clone(), env_cfg.clone());
    let layout = env.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 7));
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        env.reset(episode_seed(seed, ep));
        let mut total = Mean::default();
        loop {
            let step = env.step(&ActionVector::random(&layout, &mut rng))?;
            total.add(step.reward);
            if step.done {
                break;
            }
        }
        out.push(total.get().unwrap_or(0.0));
    }
    Ok(out)
}

/// MSE of a scalar-output net against `targets`, with its parameter gradient.
pub fn mse_loss(net: &DenseNet, inputs: ArrayView2<f64>, targets: ArrayView1<f64>) -> Result<(f64, Gradients), NnError> {
    let (out, tape) = net.forward_tape(inputs)?;
    let n = targets.len() as f64;
    let diff: Array1<f64> = out.column(0).to_owned() - targets;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let upstream = Array2::from_shape_fn((diff.len(), 1), |(i, _)| 2.0 * diff[i] / n);
    let (grads, _) = net.backward_tape(&tape, upstream.view())?;
    Ok((loss, grads))
}
