//! DQN over a factorized action space.
//!
//! Each `(RU, PRB)` slot is one decision: leave it idle or give it to a UE of
//! the owning slice at a fraction of the RU's even power split. The network
//! sees `[s | onehot(slot)]` and scores every catalog entry.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{episode_seed, AgentError, EpisodeRecord, LearningCurve, Mean, ReplayBuffer};
use crate::env::{ActionLayout, ActionVector, EnvConfig, PowerMode, SlicingEnv};
use crate::model::NetworkConfig;
use crate::nn::{Activation, Adam, DenseNet};

/// Power levels as fractions of the even split.
pub const POWER_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Idle,
    Assign { ue: usize, level: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Environment steps taken with uniformly random choices before learning.
    pub warmup: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps after warmup over which epsilon decays linearly.
    pub epsilon_decay_steps: usize,
    pub target_update_rate: f64,
    /// Largest catalog accepted.
    pub max_catalog: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            gamma: 0.98,
            lr: 3e-4,
            batch_size: 128,
            buffer_capacity: 200_000,
            warmup: 1000,
            hidden: vec![128, 128, 128],
            activation: Activation::Mish,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            target_update_rate: 0.005,
            max_catalog: 4096,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |key, reason: &str| Err(AgentError::Config { key, reason: reason.into() });
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("dqn.gamma", "must lie in (0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("dqn.lr", "must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("dqn.batch_size", "batch and buffer must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("dqn.epsilon_start", "epsilons must lie in [0, 1]");
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return bad("dqn.target_update_rate", "must lie in (0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("dqn.hidden", "layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTransition {
    pub state: Vec<f64>,
    pub slot: usize,
    pub choice: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnAgent {
    pub config: DqnConfig,
    pub layout: ActionLayout,
    /// `(RU, PRB)` per decision, RU-major.
    pub slots: Vec<(usize, usize)>,
    pub catalog: Vec<Choice>,
    /// Valid catalog entries per slot.
    pub valid: Vec<Vec<usize>>,
    pub net: DenseNet,
    pub target: DenseNet,
    pub opt: Adam,
    pub env_steps: usize,
    rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(network: &NetworkConfig, config: DqnConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let layout = ActionLayout::of(network);
        let catalog_len = 1 + layout.num_ues * POWER_FRACTIONS.len();
        if catalog_len > config.max_catalog {
            return Err(AgentError::Config {
                key: "dqn.max_catalog",
                reason: format!("catalog of {catalog_len} entries exceeds {}", config.max_catalog),
            });
        }
        let mut catalog = vec![Choice::Idle];
        for ue in 0..layout.num_ues {
            for level in 0..POWER_FRACTIONS.len() {
                catalog.push(Choice::Assign { ue, level });
            }
        }
        let slots: Vec<(usize, usize)> = (0..layout.num_rus)
            .flat_map(|r| (0..layout.num_prbs).map(move |k| (r, k)))
            .collect();
        let owners = network.prb_owners();
        let valid = slots
            .iter()
            .map(|&(_, k)| {
                (0..catalog.len())
                    .filter(|&c| match catalog[c] {
                        Choice::Idle => true,
                        Choice::Assign { ue, .. } => owners[k] == Some(network.slice_of(ue)),
                    })
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![layout.state_dim() + slots.len()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(catalog.len());
        let net = DenseNet::new(&sizes, config.activation, &mut rng);
        Ok(Self {
            opt: Adam::new(&net),
            target: net.clone(),
            net,
            layout,
            slots,
            catalog,
            valid,
            config,
            env_steps: 0,
            rng,
        })
    }

    fn input_rows(&self, rows: &[(&[f64], usize)]) -> Array2<f64> {
        let sd = self.layout.state_dim();
        let mut x = Array2::zeros((rows.len(), sd + self.slots.len()));
        for (i, (state, slot)) in rows.iter().enumerate() {
            for (j, v) in state.iter().enumerate() {
                x[[i, j]] = *v;
            }
            x[[i, sd + slot]] = 1.0;
        }
        x
    }

    fn best_valid(&self, q: ndarray::ArrayView1<f64>, slot: usize) -> (usize, f64) {
        let mut best = (self.valid[slot][0], f64::NEG_INFINITY);
        for &c in &self.valid[slot] {
            if q[c] > best.1 {
                best = (c, q[c]);
            }
        }
        best
    }

    /// Argmax over valid entries per slot; ties go to the lowest index.
    pub fn greedy(&self, state: &[f64]) -> Vec<usize> {
        let rows: Vec<(&[f64], usize)> = (0..self.slots.len()).map(|i| (state, i)).collect();
        let q = self.net.forward(self.input_rows(&rows).view()).expect("dqn input");
        (0..self.slots.len()).map(|i| self.best_valid(q.row(i), i).0).collect()
    }

    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        let progressed = self.env_steps.saturating_sub(c.warmup);
        if self.env_steps < c.warmup {
            return 1.0;
        }
        if c.epsilon_decay_steps == 0 {
            return c.epsilon_end;
        }
        let frac = (progressed as f64 / c.epsilon_decay_steps as f64).min(1.0);
        c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start)
    }

    /// Epsilon-greedy per slot, drawing from the agent's RNG.
    pub fn select(&mut self, state: &[f64]) -> Vec<usize> {
        let eps = self.epsilon();
        let greedy = if eps < 1.0 { Some(self.greedy(state)) } else { None };
        (0..self.slots.len())
            .map(|i| {
                if self.rng.random::<f64>() < eps {
                    self.valid[i][self.rng.random_range(0..self.valid[i].len())]
                } else {
                    greedy.as_ref().expect("greedy computed when eps < 1")[i]
                }
            })
            .collect()
    }

    /// Turns per-slot choices into a continuous action for the shared projection.
    ///
    /// A UE attaches to the RU where it won the most slots (lowest RU on ties).
    pub fn decode(&self, choices: &[usize]) -> ActionVector {
        let l = self.layout;
        let mut v = vec![-1.0f64; l.dim()];
        let mut counts = vec![vec![0usize; l.num_rus]; l.num_ues];
        for (&(r, k), &c) in self.slots.iter().zip(choices) {
            if let Choice::Assign { ue, level } = self.catalog[c] {
                counts[ue][r] += 1;
                v[l.prb(ue, k)] = 1.0;
                let score = 2.0 * POWER_FRACTIONS[level] - 1.0;
                v[l.power(ue, k)] = v[l.power(ue, k)].max(score);
            }
        }
        for (u, row) in counts.iter().enumerate() {
            let best = (0..l.num_rus).fold(0, |b, r| if row[r] > row[b] { r } else { b });
            if row[best] > 0 {
                v[l.assoc(u, best)] = 1.0;
            }
        }
        ActionVector::new(v)
    }

    pub fn act_greedy(&self, state: &[f64]) -> ActionVector {
        self.decode(&self.greedy(state))
    }

    /// One TD step on a minibatch of slot transitions; returns the loss.
    pub fn update(&mut self, buffer: &ReplayBuffer<SlotTransition>) -> Result<f64, AgentError> {
        let idx = buffer.sample_indices(self.config.batch_size, &mut self.rng);
        let rows: Vec<&SlotTransition> = idx.iter().map(|&i| buffer.get(i)).collect();
        let n = rows.len() as f64;
        let x = self.input_rows(&rows.iter().map(|t| (t.state.as_slice(), t.slot)).collect::<Vec<_>>());
        let x_next = self.input_rows(&rows.iter().map(|t| (t.next_state.as_slice(), t.slot)).collect::<Vec<_>>());
        let q_next = self.target.forward(x_next.view())?;
        let y: Array1<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, t)| t.reward + self.config.gamma * self.best_valid(q_next.row(i), t.slot).1)
            .collect();
        let (q, tape) = self.net.forward_tape(x.view())?;
        let mut upstream = Array2::zeros(q.raw_dim());
        let mut loss = 0.0;
        for (i, t) in rows.iter().enumerate() {
            let d = q[[i, t.choice]] - y[i];
            loss += d * d / n;
            upstream[[i, t.choice]] = 2.0 * d / n;
        }
        let (grads, _) = self.net.backward_tape(&tape, upstream.view())?;
        self.opt.update(&mut self.net, &grads, self.config.lr);
        self.target.soft_update(&self.net, 1.0 - self.config.target_update_rate)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct DqnOutcome {
    pub agent: DqnAgent,
    pub curve: LearningCurve,
}

/// Trains the baseline on the same episodes and reward as the diffusion agent.
/// Every slot decision is stored as its own transition sharing the step reward.
pub fn dqn_baseline(
    network: &NetworkConfig,
    env_cfg: &EnvConfig,
    cfg: &DqnConfig,
    seed: u64,
) -> Result<DqnOutcome, AgentError> {
    let env_cfg = EnvConfig {
        power_mode: PowerMode::Learned,
        ..env_cfg.clone()
    };
    let mut env = SlicingEnv::new(network.clone(), env_cfg);
    let mut agent = DqnAgent::new(network, cfg.clone(), crate::derive_seed(seed, 4))?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut curve = LearningCurve::default();
    for ep in 0..cfg.episodes {
        let mut state = env.reset(episode_seed(seed, ep)).to_vec();
        let (mut reward, mut td) = (Mean::default(), Mean::default());
        loop {
            let choices = agent.select(&state);
            let step = env.step(&agent.decode(&choices))?;
            let next = step.state.to_vec();
            for (slot, &choice) in choices.iter().enumerate() {
                buffer.push(SlotTransition {
                    state: state.clone(),
                    slot,
                    choice,
                    reward: step.reward,
                    next_state: next.clone(),
                });
            }
            state = next;
            agent.env_steps += 1;
            reward.add(step.reward);
            if agent.env_steps >= cfg.warmup {
                td.add(agent.update(&buffer)?);
            }
            if step.done {
                break;
            }
        }
        curve.episodes.push(EpisodeRecord {
            episode: ep,
            mean_reward: reward.get().unwrap_or(0.0),
            critic_loss: td.get(),
            policy_loss: None,
        });
    }
    Ok(DqnOutcome { agent, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::project_action;

    fn small() -> DqnConfig {
        DqnConfig {
            hidden: vec![8],
            batch_size: 8,
            ..DqnConfig::default()
        }
    }

    #[test]
    fn catalog_and_masks_follow_slice_ownership() {
        let net = NetworkConfig::desk();
        let agent = DqnAgent::new(&net, small(), 0).unwrap();
        assert_eq!(agent.catalog.len(), 17);
        // PRBs 0,1 belong to eMBB (UEs 0,1); PRB 2 to URLLC (UE 2); PRB 3 to mMTC (UE 3)
        assert_eq!(agent.valid[0], vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(agent.valid[2], vec![0, 9, 10, 11, 12]);
        assert_eq!(agent.valid[3], vec![0, 13, 14, 15, 16]);
    }

    #[test]
    fn oversized_catalog_is_refused() {
        let net = NetworkConfig::desk();
        let cfg = DqnConfig {
            max_catalog: 10,
            ..small()
        };
        assert!(matches!(
            DqnAgent::new(&net, cfg, 0),
            Err(AgentError::Config { key: "dqn.max_catalog", .. })
        ));
    }

    #[test]
    fn decoded_levels_become_fractions_of_even_split() {
        let net = NetworkConfig::desk();
        let agent = DqnAgent::new(&net, small(), 0).unwrap();
        // UE 0 full level on PRB 0, UE 1 quarter on PRB 1, URLLC half, mMTC idle
        let choices = [4, 5, 10, 0];
        let alloc = project_action(&agent.decode(&choices), &net, PowerMode::Learned);
        let share = net.ru_max_power() / 3.0;
        assert!(alloc.prb[[0, 0, 0]] && alloc.prb[[1, 0, 1]] && alloc.prb[[2, 0, 2]]);
        assert!(!alloc.prb[[3, 0, 3]]);
        assert!((alloc.power[[0, 0, 0]] - share).abs() < 1e-9);
        assert!((alloc.power[[1, 0, 1]] - 0.25 * share).abs() < 1e-9);
        assert!((alloc.power[[2, 0, 2]] - 0.5 * share).abs() < 1e-9);
    }

    #[test]
    fn full_exploration_is_uniform_over_valid_entries() {
        let net = NetworkConfig::desk();
        let mut agent = DqnAgent::new(&net, small(), 1).unwrap();
        let state = vec![0.0; agent.layout.state_dim()];
        let mut counts = vec![0usize; agent.catalog.len()];
        let draws = 9_000;
        for _ in 0..draws {
            counts[agent.select(&state)[0]] += 1;
        }
        for &c in &agent.valid[0] {
            let p = counts[c] as f64 / draws as f64;
            assert!((p - 1.0 / 9.0).abs() < 0.02, "{c}: {p}");
        }
        assert_eq!(counts[9..].iter().sum::<usize>(), 0);
    }

    #[test]
    fn greedy_is_deterministic() {
        let net = NetworkConfig::desk();
        let agent = DqnAgent::new(&net, small(), 2).unwrap();
        let s = vec![1.0, 0.0, 1.0, 0.0, 0.5];
        assert_eq!(agent.greedy(&s), agent.greedy(&s));
    }
}
