//! The allocation task as a Markov decision process.
//!
//! The policy emits a flat continuous vector in `[-1, 1]^d`; [`project_action`]
//! decodes it into an [`Allocation`] that satisfies association, PRB
//! exclusivity, slice PRB partitioning and the power budgets by construction.
//!
//! Action layout, `U` UEs, `R` RUs, `K` PRBs:
//!
//! | segment     | length  | index of `(u, x)` |
//! |-------------|---------|-------------------|
//! | association | `U * R` | `u * R + r`       |
//! | PRB scores  | `U * K` | `U*R + u * K + k` |
//! | power       | `U * K` | `U*R + U*K + u * K + k` |

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    check_constraints, evaluate, Allocation, ChannelRealization, ConstraintReport, LinkMetrics,
    NetworkConfig, Scenario,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("episode finished after {0} steps; call reset")]
    EpisodeFinished(usize),
    #[error("step called before reset")]
    NotReset,
    #[error("action has {found} entries, expected {expected}")]
    ActionDimension { expected: usize, found: usize },
}

/// Weights of rate, constraint violation and bias in the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub rate: f64,
    pub constraint: f64,
    pub bias: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            rate: 1.0,
            constraint: -1.0,
            bias: 0.0,
        }
    }
}

/// Whether per-PRB powers come from the action or are split evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    #[default]
    Learned,
    UniformSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub episode_len: usize,
    /// Quantization levels of the per-RU power fraction in the state.
    pub power_levels: usize,
    pub reward: RewardWeights,
    /// SINR in dB whose per-PRB rate defines the rate normalization.
    pub reference_sinr_db: f64,
    pub power_mode: PowerMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_len: 50,
            power_levels: 8,
            reward: RewardWeights::default(),
            reference_sinr_db: 15.0,
            power_mode: PowerMode::Learned,
        }
    }
}

impl EnvConfig {
    /// `K * B * log2(1 + rho_ref)`.
    pub fn rate_scale(&self, network: &NetworkConfig) -> f64 {
        let rho = 10f64.powf(self.reference_sinr_db / 10.0);
        network.total_prbs as f64 * network.prb_bandwidth * (1.0 + rho).log2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLayout {
    pub num_ues: usize,
    pub num_rus: usize,
    pub num_prbs: usize,
}

impl ActionLayout {
    pub fn of(config: &NetworkConfig) -> Self {
        Self {
            num_ues: config.num_ues(),
            num_rus: config.num_rus,
            num_prbs: config.total_prbs,
        }
    }

    pub fn dim(&self) -> usize {
        self.num_ues * (self.num_rus + 2 * self.num_prbs)
    }

    pub fn assoc(&self, u: usize, r: usize) -> usize {
        u * self.num_rus + r
    }

    pub fn prb(&self, u: usize, k: usize) -> usize {
        self.num_ues * self.num_rus + u * self.num_prbs + k
    }

    pub fn power(&self, u: usize, k: usize) -> usize {
        self.num_ues * (self.num_rus + self.num_prbs) + u * self.num_prbs + k
    }

    /// State width: one QoS bit per UE plus one power level per RU.
    pub fn state_dim(&self) -> usize {
        self.num_ues + self.num_rus
    }
}

/// Continuous action, entries clipped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(Vec<f64>);

impl ActionVector {
    pub fn new(mut values: Vec<f64>) -> Self {
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self(values)
    }

    pub fn filled(layout: &ActionLayout, value: f64) -> Self {
        Self::new(vec![value; layout.dim()])
    }

    pub fn random<R: Rng + ?Sized>(layout: &ActionLayout, rng: &mut R) -> Self {
        Self((0..layout.dim()).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-UE QoS satisfaction bits followed by quantized per-RU power usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    pub qos: Vec<f64>,
    pub power_level: Vec<f64>,
}

impl MdpState {
    pub fn initial(layout: &ActionLayout) -> Self {
        Self {
            qos: vec![0.0; layout.num_ues],
            power_level: vec![0.0; layout.num_rus],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.qos.iter().chain(&self.power_level).copied().collect()
    }
}

/// Decodes a continuous action into a structurally feasible allocation.
///
/// 1. Each UE attaches to its highest-scoring RU.
/// 2. Each PRB of a slice block, on each RU, goes to the attached UE of that
///    slice with the highest positive score.
/// 3. Power is `(score + 1) / 2` of an even split of the RU budget over its
///    scheduled PRBs, then scaled down to honour the RU budget and slice caps.
///
/// Ties go to the lowest index.
pub fn project_action(action: &ActionVector, config: &NetworkConfig, power_mode: PowerMode) -> Allocation {
    let layout = ActionLayout::of(config);
    assert_eq!(action.len(), layout.dim(), "action dimension");
    let a = action.as_slice();
    let (u_n, r_n, k_n) = (layout.num_ues, layout.num_rus, layout.num_prbs);
    let ue_slices = config.ue_slices();
    let owners = config.prb_owners();
    let mut alloc = Allocation::zeros(u_n, r_n, k_n);

    let mut serving = vec![0; u_n];
    for u in 0..u_n {
        let mut best = 0;
        for r in 1..r_n {
            if a[layout.assoc(u, r)] > a[layout.assoc(u, best)] {
                best = r;
            }
        }
        serving[u] = best;
        alloc.assoc[[u, best]] = true;
    }

    let p_max = config.ru_max_power();
    for r in 0..r_n {
        let mut scheduled = Vec::new();
        for (k, owner) in owners.iter().enumerate() {
            let Some(slice) = *owner else { continue };
            let mut best: Option<usize> = None;
            for u in config.ues_of_slice(slice) {
                if serving[u] != r {
                    continue;
                }
                match best {
                    Some(b) if a[layout.prb(u, k)] <= a[layout.prb(b, k)] => {}
                    _ => best = Some(u),
                }
            }
            if let Some(u) = best.filter(|&u| a[layout.prb(u, k)] > 0.0) {
                alloc.prb[[u, r, k]] = true;
                scheduled.push((u, k));
            }
        }
        if scheduled.is_empty() {
            continue;
        }
        let share = p_max / scheduled.len() as f64;
        for &(u, k) in &scheduled {
            let fraction = match power_mode {
                PowerMode::Learned => (a[layout.power(u, k)] + 1.0) / 2.0,
                PowerMode::UniformSplit => 1.0,
            };
            alloc.power[[u, r, k]] = fraction * share;
        }
        let total: f64 = scheduled.iter().map(|&(u, k)| alloc.power[[u, r, k]]).sum();
        if total > p_max {
            let scale = p_max / total;
            for &(u, k) in &scheduled {
                alloc.power[[u, r, k]] *= scale;
            }
        }
        for s in 0..config.num_slices() {
            let Some(cap) = config.slice_power_cap(s) else { continue };
            let mine: Vec<(usize, usize)> = scheduled.iter().copied().filter(|&(u, _)| ue_slices[u] == s).collect();
            let spent: f64 = mine.iter().map(|&(u, k)| alloc.power[[u, r, k]]).sum();
            if spent > cap {
                let scale = cap / spent;
                for (u, k) in mine {
                    alloc.power[[u, r, k]] *= scale;
                }
            }
        }
    }
    alloc
}

fn encode_with_metrics(alloc: &Allocation, metrics: &LinkMetrics, config: &NetworkConfig, levels: usize) -> MdpState {
    let ue_slices = config.ue_slices();
    let qos = (0..alloc.shape().0)
        .map(|u| {
            let spec = &config.slices[ue_slices[u]];
            let rate = metrics.rate_ue[u];
            let rate_ok = rate > 0.0 && rate >= spec.min_rate;
            let delay_ok = spec.max_delay.is_none_or(|d| metrics.delay[u] <= d);
            if rate_ok && delay_ok {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let p_max = config.ru_max_power();
    let l = levels.max(1) as f64;
    let power_level = (0..alloc.shape().1)
        .map(|r| ((l * alloc.ru_power(r) / p_max).round() / l).clamp(0.0, 1.0))
        .collect();
    MdpState { qos, power_level }
}

/// QoS bit is set when the UE is served, meets its slice's minimum rate
/// (inclusive) and, when bounded, its delay target.
pub fn encode_state(alloc: &Allocation, chan: &ChannelRealization, config: &NetworkConfig, levels: usize) -> MdpState {
    let metrics = evaluate(alloc, chan, config);
    encode_with_metrics(alloc, &metrics, config, levels)
}

pub fn reward_from(metrics: &LinkMetrics, report: &ConstraintReport, network: &NetworkConfig, cfg: &EnvConfig) -> f64 {
    let w = cfg.reward;
    w.rate * metrics.rate_total / cfg.rate_scale(network) + w.constraint * report.normalized_violation() + w.bias
}

/// Weighted normalized rate, constraint violation and bias.
pub fn reward(alloc: &Allocation, chan: &ChannelRealization, network: &NetworkConfig, cfg: &EnvConfig) -> f64 {
    let metrics = evaluate(alloc, chan, network);
    let report = check_constraints(alloc, chan, network);
    reward_from(&metrics, &report, network, cfg)
}

/// Outcome of applying one action.
#[derive(Debug, Clone)]
pub struct Step {
    pub state: MdpState,
    pub reward: f64,
    pub allocation: Allocation,
    pub metrics: LinkMetrics,
    pub report: ConstraintReport,
    pub done: bool,
}

/// Evaluates an action on a fixed channel without touching any episode state.
pub fn apply_action(
    action: &ActionVector,
    chan: &ChannelRealization,
    network: &NetworkConfig,
    cfg: &EnvConfig,
) -> Step {
    let allocation = project_action(action, network, cfg.power_mode);
    let metrics = evaluate(&allocation, chan, network);
    let report = crate::model::constraints_with_metrics(&allocation, &metrics, network);
    let reward = reward_from(&metrics, &report, network, cfg);
    let state = encode_with_metrics(&allocation, &metrics, network, cfg.power_levels);
    Step {
        state,
        reward,
        allocation,
        metrics,
        report,
        done: false,
    }
}

/// Block-fading episode over a fixed node placement.
#[derive(Debug, Clone)]
pub struct SlicingEnv {
    network: NetworkConfig,
    cfg: EnvConfig,
    layout: ActionLayout,
    scenario: Option<Scenario>,
    rng: ChaCha8Rng,
    steps: usize,
}

impl SlicingEnv {
    pub fn new(network: NetworkConfig, cfg: EnvConfig) -> Self {
        let layout = ActionLayout::of(&network);
        Self {
            network,
            cfg,
            layout,
            scenario: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
        }
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> ActionLayout {
        self.layout
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        self.scenario.as_ref()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Places UEs and draws the first channel. The initial state has every
    /// QoS bit and power level at zero.
    pub fn reset(&mut self, seed: u64) -> MdpState {
        self.scenario = Some(Scenario::draw(&self.network, seed));
        self.rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 1));
        self.steps = 0;
        MdpState::initial(&self.layout)
    }

    /// Scores the action on the current channel, then redraws the fading.
    pub fn step(&mut self, action: &ActionVector) -> Result<Step, EnvError> {
        let scenario = self.scenario.as_mut().ok_or(EnvError::NotReset)?;
        if self.steps >= self.cfg.episode_len {
            return Err(EnvError::EpisodeFinished(self.steps));
        }
        if action.len() != self.layout.dim() {
            return Err(EnvError::ActionDimension {
                expected: self.layout.dim(),
                found: action.len(),
            });
        }
        let mut step = apply_action(action, &scenario.channel, &self.network, &self.cfg);
        scenario.refade(&self.network, self.rng.next_u64());
        self.steps += 1;
        step.done = self.steps >= self.cfg.episode_len;
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SliceSpec;

    fn single(prbs: usize, ues: usize) -> NetworkConfig {
        let mut spec = SliceSpec::embb(ues);
        spec.prb_quota = Some(prbs);
        NetworkConfig {
            num_rus: 1,
            slices: vec![spec],
            total_prbs: prbs,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn all_negative_attaches_everyone_schedules_nothing() {
        let mut cfg = NetworkConfig::desk();
        cfg.num_rus = 2;
        let layout = ActionLayout::of(&cfg);
        let alloc = project_action(&ActionVector::filled(&layout, -1.0), &cfg, PowerMode::Learned);
        for u in 0..4 {
            assert_eq!(alloc.serving_ru(u), Some(0));
        }
        assert!(alloc.prb.iter().all(|b| !b));
        assert!(alloc.power.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn saturated_action_uses_full_budget() {
        let cfg = single(1, 1);
        let layout = ActionLayout::of(&cfg);
        let alloc = project_action(&ActionVector::filled(&layout, 1.0), &cfg, PowerMode::Learned);
        assert!(alloc.assoc[[0, 0]] && alloc.prb[[0, 0, 0]]);
        assert_eq!(alloc.power[[0, 0, 0]], cfg.ru_max_power());
    }

    #[test]
    fn contended_prb_goes_to_higher_score() {
        let cfg = single(1, 2);
        let layout = ActionLayout::of(&cfg);
        let mut v = vec![0.0; layout.dim()];
        v[layout.prb(0, 0)] = 0.3;
        v[layout.prb(1, 0)] = 0.7;
        let alloc = project_action(&ActionVector::new(v), &cfg, PowerMode::Learned);
        assert!(alloc.prb[[1, 0, 0]] && !alloc.prb[[0, 0, 0]]);
    }

    #[test]
    fn uniform_split_ignores_power_scores() {
        let cfg = single(2, 1);
        let layout = ActionLayout::of(&cfg);
        let mut v = vec![1.0; layout.dim()];
        v[layout.power(0, 0)] = -1.0;
        let alloc = project_action(&ActionVector::new(v), &cfg, PowerMode::UniformSplit);
        let half = cfg.ru_max_power() / 2.0;
        assert_eq!(alloc.power[[0, 0, 0]], half);
        assert_eq!(alloc.power[[0, 0, 1]], half);
    }

    #[test]
    fn slice_cap_scales_slice_power() {
        let mut cfg = NetworkConfig::desk();
        cfg.slices[0].power_cap_dbm = Some(30.0);
        let layout = ActionLayout::of(&cfg);
        let alloc = project_action(&ActionVector::filled(&layout, 1.0), &cfg, PowerMode::Learned);
        let embb: f64 = (0..2).map(|k| alloc.power.slice(ndarray::s![0..2, 0, k]).sum()).sum();
        assert!((embb - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_boundaries() {
        let mut cfg = single(2, 1);
        cfg.slices[0].min_rate = 0.0;
        let chan = ChannelRealization {
            gain: ndarray::Array3::from_elem((1, 1, 2), 1.0),
            external: None,
            seed: 0,
        };
        let empty = Allocation::empty_for(&cfg);
        let s = encode_state(&empty, &chan, &cfg, 8);
        assert_eq!(s.qos, vec![0.0]);
        assert_eq!(s.power_level, vec![0.0]);

        let mut a = Allocation::empty_for(&cfg);
        a.assoc[[0, 0]] = true;
        a.prb[[0, 0, 0]] = true;
        a.power[[0, 0, 0]] = cfg.prb_noise();
        // rate is exactly B * log2(2) = B
        cfg.slices[0].min_rate = cfg.prb_bandwidth;
        assert_eq!(encode_state(&a, &chan, &cfg, 8).qos, vec![1.0]);
        cfg.slices[0].min_rate = cfg.prb_bandwidth * 1.000001;
        assert_eq!(encode_state(&a, &chan, &cfg, 8).qos, vec![0.0]);

        a.power[[0, 0, 0]] = cfg.ru_max_power() / 2.0;
        assert_eq!(encode_state(&a, &chan, &cfg, 8).power_level, vec![0.5]);
    }

    #[test]
    fn reward_terms() {
        let cfg = NetworkConfig::desk();
        let chan = Scenario::draw(&cfg, 1).channel;
        let empty = Allocation::empty_for(&cfg);
        let env_cfg = EnvConfig::default();
        let report = check_constraints(&empty, &chan, &cfg);
        let r = reward(&empty, &chan, &cfg, &env_cfg);
        assert_eq!(r, -report.normalized_violation());
        assert!(r < 0.0);

        let bias_only = EnvConfig {
            reward: RewardWeights {
                rate: 0.0,
                constraint: 0.0,
                bias: 5.0,
            },
            ..EnvConfig::default()
        };
        let layout = ActionLayout::of(&cfg);
        let full = project_action(&ActionVector::filled(&layout, 1.0), &cfg, PowerMode::Learned);
        assert_eq!(reward(&full, &chan, &cfg, &bias_only), 5.0);
        assert_eq!(reward(&empty, &chan, &cfg, &bias_only), 5.0);
    }

    #[test]
    fn rate_scale_matches_reference_sinr() {
        let cfg = NetworkConfig::desk();
        let scale = EnvConfig::default().rate_scale(&cfg);
        let expected = 4.0 * 180e3 * (1.0 + 10f64.powf(1.5)).log2();
        assert!((scale - expected).abs() < 1e-6);
    }

    #[test]
    fn episode_mechanics() {
        let cfg = NetworkConfig::desk();
        let mut env = SlicingEnv::new(cfg.clone(), EnvConfig::default());
        let a = ActionVector::filled(&env.layout(), 0.5);
        assert_eq!(env.step(&a).unwrap_err(), EnvError::NotReset);
        let s0 = env.reset(3);
        assert!(s0.qos.iter().all(|q| *q == 0.0));
        for i in 0..50 {
            let st = env.step(&a).unwrap();
            assert_eq!(st.done, i == 49);
        }
        assert_eq!(env.step(&a).unwrap_err(), EnvError::EpisodeFinished(50));
        let bad = ActionVector::new(vec![0.0; 3]);
        env.reset(3);
        assert!(matches!(env.step(&bad), Err(EnvError::ActionDimension { .. })));
    }

    #[test]
    fn zero_power_action_earns_only_the_penalty() {
        let cfg = NetworkConfig::desk();
        let mut env = SlicingEnv::new(cfg.clone(), EnvConfig::default());
        env.reset(9);
        let layout = env.layout();
        let mut v = vec![1.0; layout.dim()];
        for u in 0..layout.num_ues {
            for k in 0..layout.num_prbs {
                v[layout.power(u, k)] = -1.0;
            }
        }
        let st = env.step(&ActionVector::new(v)).unwrap();
        assert_eq!(st.metrics.rate_total, 0.0);
        assert_eq!(st.reward, -st.report.normalized_violation());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = NetworkConfig::desk();
        let run = |seed| {
            let mut env = SlicingEnv::new(cfg.clone(), EnvConfig::default());
            env.reset(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..10)
                .map(|_| {
                    let a = ActionVector::random(&env.layout(), &mut rng);
                    let st = env.step(&a).unwrap();
                    (st.reward.to_bits(), st.state)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
