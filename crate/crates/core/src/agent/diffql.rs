use ndarray::{Array1, ArrayView1, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{episode_seed, mse_loss, AgentError, EpisodeRecord, LearningCurve, Mean, ReplayBuffer, Transition};
use crate::diffusion::{concat_columns, DiffusionPolicy, Guide, NoiseSchedule};
use crate::env::{ActionLayout, ActionVector, EnvConfig, SlicingEnv};
use crate::model::NetworkConfig;
use crate::nn::{Activation, Adam, DenseNet, Gradients};

/// Which critic steers the target policy when sampling `a'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetGuide {
    #[default]
    TargetCritic,
    OnlineCritic,
    Unguided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    /// Fraction of the online weights blended into the targets per update.
    pub target_update_rate: f64,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub lr_policy: f64,
    /// Base Q weight; the effective weight is `lambda0 / mean|Q|`.
    pub lambda0: f64,
    pub buffer_capacity: usize,
    /// Random-action transitions collected before learning starts.
    pub warmup: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub guidance_scale: f64,
    /// Guide samples drawn for data collection and the policy loss.
    pub guide_in_training: bool,
    pub target_guide: TargetGuide,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            gamma: 0.98,
            target_update_rate: 0.005,
            batch_size: 128,
            lr_critic: 3e-4,
            lr_policy: 1e-4,
            lambda0: 1.0,
            buffer_capacity: 200_000,
            warmup: 1000,
            hidden: vec![128, 128, 128],
            activation: Activation::Mish,
            diffusion_steps: 20,
            beta_min: 1e-4,
            beta_max: 2e-2,
            guidance_scale: 1.2,
            guide_in_training: true,
            target_guide: TargetGuide::TargetCritic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |key, reason: &str| Err(AgentError::Config { key, reason: reason.into() });
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("train.gamma", "must lie in (0, 1)");
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return bad("train.target_update_rate", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("train.buffer_capacity", "must be positive");
        }
        if !(self.lambda0 >= 0.0) {
            return bad("train.lambda0", "must be nonnegative");
        }
        if !(self.lr_critic > 0.0 && self.lr_policy > 0.0) {
            return bad("train.lr_critic", "learning rates must be positive");
        }
        if !(self.guidance_scale >= 0.0) {
            return bad("train.guidance_scale", "must be nonnegative");
        }
        if self.hidden.contains(&0) {
            return bad("train.hidden", "layer widths must be positive");
        }
        if let Err(e) = self.schedule() {
            return Err(AgentError::Config {
                key: "train.diffusion_steps",
                reason: e.to_string(),
            });
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, crate::diffusion::DiffusionError> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }
}

/// Twin critics over `[s | a]` with their targets and optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub q1_target: DenseNet,
    pub q2_target: DenseNet,
    pub opt1: Adam,
    pub opt2: Adam,
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = DenseNet::new(&sizes, activation, rng);
        let q2 = DenseNet::new(&sizes, activation, rng);
        Self {
            opt1: Adam::new(&q1),
            opt2: Adam::new(&q2),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        }
    }

    /// `min(Q'_1, Q'_2)` row-wise.
    pub fn target_min(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>, AgentError> {
        let x = concat_columns(&[states, actions]);
        let a = self.q1_target.forward(x.view())?;
        let b = self.q2_target.forward(x.view())?;
        Ok(Zip::from(a.column(0)).and(b.column(0)).map_collect(|&a, &b| a.min(b)))
    }

    /// Blends `rate` of the online weights into each target.
    pub fn soft_update(&mut self, rate: f64) -> Result<(), AgentError> {
        self.q1_target.soft_update(&self.q1, 1.0 - rate)?;
        self.q2_target.soft_update(&self.q2, 1.0 - rate)?;
        Ok(())
    }
}

/// `y = r + gamma * min_i Q'_i(s', a')` with `a'` drawn from the target policy.
pub fn td_target<R: Rng + ?Sized>(
    rewards: ArrayView1<f64>,
    next_states: ArrayView2<f64>,
    critics: &CriticPair,
    target_policy: &DiffusionPolicy,
    guide: TargetGuide,
    gamma: f64,
    rng: &mut R,
) -> Result<Array1<f64>, AgentError> {
    let g: Option<&dyn Guide> = match guide {
        TargetGuide::TargetCritic => Some(&critics.q1_target),
        TargetGuide::OnlineCritic => Some(&critics.q1),
        TargetGuide::Unguided => None,
    };
    let next_actions = target_policy.sample(next_states, g, rng)?;
    let q = critics.target_min(next_states, next_actions.view())?;
    Ok(&rewards + &q.mapv(|v| gamma * v))
}

/// One Adam step per critic on the MSE to `targets`; returns both losses.
pub fn critic_update(
    critics: &mut CriticPair,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    lr: f64,
) -> Result<(f64, f64), AgentError> {
    let x = concat_columns(&[states, actions]);
    let (l1, g1) = mse_loss(&critics.q1, x.view(), targets)?;
    let (l2, g2) = mse_loss(&critics.q2, x.view(), targets)?;
    critics.opt1.update(&mut critics.q1, &g1, lr);
    critics.opt2.update(&mut critics.q2, &g2, lr);
    Ok((l1, l2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLoss {
    pub total: f64,
    pub denoise: f64,
    /// Mean `Q_1(s, a_0)` over the batch; zero when the Q term is off.
    pub q_mean: f64,
    /// Effective weight on the Q term.
    pub lambda: f64,
}

/// `L = L_denoise - lambda * mean Q_1(s, a_0)` and its denoiser gradient,
/// with `lambda` treated as a constant.
///
/// `a_0` is sampled through the full reverse chain and the Q gradient flows
/// back through every denoiser call.
pub fn policy_gradient<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    critic: &DenseNet,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    lambda0: f64,
    guided: bool,
    rng: &mut R,
) -> Result<(PolicyLoss, Gradients), AgentError> {
    let (denoise, mut grads) = policy.denoise_loss(states, actions, rng)?;
    let (mut q_mean, mut lambda) = (0.0, 0.0);
    if lambda0 > 0.0 {
        let guide: Option<&dyn Guide> = if guided { Some(critic) } else { None };
        let (a0, tape) = policy.sample_with_tape(states, guide, rng)?;
        let q = critic.forward(concat_columns(&[states, a0.view()]).view())?;
        let n = q.nrows() as f64;
        q_mean = q.sum() / n;
        let scale = q.mapv(f64::abs).sum() / n;
        lambda = lambda0 / scale.max(1e-6);
        let grad_a = critic.action_gradient(states, a0.view()).mapv(|g| -lambda * g / n);
        grads.add_assign(&policy.chain_backward(&tape, grad_a.view())?);
    }
    let loss = PolicyLoss {
        total: denoise - lambda * q_mean,
        denoise,
        q_mean,
        lambda,
    };
    Ok((loss, grads))
}

/// [`policy_gradient`] followed by one Adam step.
#[allow(clippy::too_many_arguments)]
pub fn policy_update<R: Rng + ?Sized>(
    policy: &mut DiffusionPolicy,
    opt: &mut Adam,
    critic: &DenseNet,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    lambda0: f64,
    lr: f64,
    guided: bool,
    rng: &mut R,
) -> Result<PolicyLoss, AgentError> {
    let (loss, grads) = policy_gradient(policy, critic, states, actions, lambda0, guided, rng)?;
    opt.update(&mut policy.denoiser, &grads, lr);
    Ok(loss)
}

/// Policy, target policy and critics with their optimizers and RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffQlAgent {
    pub config: TrainConfig,
    pub layout: ActionLayout,
    pub policy: DiffusionPolicy,
    pub target_policy: DiffusionPolicy,
    pub policy_opt: Adam,
    pub critics: CriticPair,
    rng: ChaCha8Rng,
}

impl DiffQlAgent {
    pub fn new(layout: ActionLayout, config: TrainConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ad, sd) = (layout.dim(), layout.state_dim());
        let policy = DiffusionPolicy::new(
            ad,
            sd,
            &config.hidden,
            config.activation,
            config.schedule()?,
            config.guidance_scale,
            &mut rng,
        );
        let critics = CriticPair::new(ad + sd, &config.hidden, config.activation, &mut rng);
        Ok(Self {
            layout,
            policy_opt: Adam::new(&policy.denoiser),
            target_policy: policy.clone(),
            policy,
            critics,
            config,
            rng,
        })
    }

    fn guide(&self, guided: bool) -> Option<&dyn Guide> {
        (guided && self.config.guidance_scale > 0.0).then_some(&self.critics.q1 as &dyn Guide)
    }

    /// Guided sample for `state` using the caller's RNG; leaves the agent untouched.
    pub fn act_with<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<ActionVector, AgentError> {
        let s = ndarray::Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let a = self.policy.sample(s.view(), self.guide(true), rng)?;
        Ok(ActionVector::new(a.row(0).to_vec()))
    }

    /// Draws `candidates` guided samples and keeps the one with the largest
    /// `min(Q_1, Q_2)`; the first wins ties. One candidate is [`Self::act_with`].
    pub fn act_greedy_with<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        candidates: usize,
        rng: &mut R,
    ) -> Result<ActionVector, AgentError> {
        let n = candidates.max(1);
        let s = ndarray::Array2::from_shape_fn((n, state.len()), |(_, j)| state[j]);
        let a = self.policy.sample(s.view(), self.guide(true), rng)?;
        if n == 1 {
            return Ok(ActionVector::new(a.row(0).to_vec()));
        }
        let x = concat_columns(&[s.view(), a.view()]);
        let q1 = self.critics.q1.forward(x.view())?;
        let q2 = self.critics.q2.forward(x.view())?;
        let mut best = 0;
        let mut best_q = f64::NEG_INFINITY;
        for i in 0..n {
            let q = q1[[i, 0]].min(q2[[i, 0]]);
            if q > best_q {
                best = i;
                best_q = q;
            }
        }
        Ok(ActionVector::new(a.row(best).to_vec()))
    }

    /// Exploration sample drawn with the agent's own RNG.
    pub fn act(&mut self, state: &[f64]) -> Result<ActionVector, AgentError> {
        let s = ndarray::Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let mut rng = self.rng.clone();
        let a = self.policy.sample(s.view(), self.guide(self.config.guide_in_training), &mut rng)?;
        self.rng = rng;
        Ok(ActionVector::new(a.row(0).to_vec()))
    }

    /// Critic step, policy step, then soft target updates.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<(f64, PolicyLoss), AgentError> {
        let cfg = &self.config;
        let batch = buffer.sample(cfg.batch_size, &mut self.rng);
        let y = td_target(
            batch.rewards.view(),
            batch.next_states.view(),
            &self.critics,
            &self.target_policy,
            cfg.target_guide,
            cfg.gamma,
            &mut self.rng,
        )?;
        let (l1, l2) = critic_update(
            &mut self.critics,
            batch.states.view(),
            batch.actions.view(),
            y.view(),
            cfg.lr_critic,
        )?;
        let loss = policy_update(
            &mut self.policy,
            &mut self.policy_opt,
            &self.critics.q1,
            batch.states.view(),
            batch.actions.view(),
            cfg.lambda0,
            cfg.lr_policy,
            cfg.guide_in_training,
            &mut self.rng,
        )?;
        let rate = cfg.target_update_rate;
        self.critics.soft_update(rate)?;
        self.target_policy
            .denoiser
            .soft_update(&self.policy.denoiser, 1.0 - rate)?;
        Ok((0.5 * (l1 + l2), loss))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: DiffQlAgent,
    pub curve: LearningCurve,
}

/// Full training loop. Each episode draws a fresh scenario; learning starts
/// once `warmup` random transitions are stored, with one update per step.
pub fn train(
    network: &NetworkConfig,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, AgentError> {
    let mut env = SlicingEnv::new(network.clone(), env_cfg.clone());
    let layout = env.layout();
    let mut agent = DiffQlAgent::new(layout, cfg.clone(), crate::derive_seed(seed, 2))?;
    let mut explore = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 3));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut curve = LearningCurve::default();
    let mut collected = 0usize;
    for ep in 0..cfg.episodes {
        let mut state = env.reset(episode_seed(seed, ep)).to_vec();
        let (mut reward, mut critic_loss, mut policy_loss) = (Mean::default(), Mean::default(), Mean::default());
        loop {
            let action = if collected < cfg.warmup {
                ActionVector::random(&layout, &mut explore)
            } else {
                agent.act(&state)?
            };
            let step = env.step(&action)?;
            let next = step.state.to_vec();
            buffer.push(Transition {
                state: std::mem::replace(&mut state, next.clone()),
                action: action.as_slice().to_vec(),
                reward: step.reward,
                next_state: next,
            });
            collected += 1;
            reward.add(step.reward);
            if collected >= cfg.warmup {
                let (c, p) = agent.update(&buffer)?;
                critic_loss.add(c);
                policy_loss.add(p.total);
            }
            if step.done {
                break;
            }
        }
        curve.episodes.push(EpisodeRecord {
            episode: ep,
            mean_reward: reward.get().unwrap_or(0.0),
            critic_loss: critic_loss.get(),
            policy_loss: policy_loss.get(),
        });
    }
    Ok(TrainOutcome { agent, curve })
}
