//! Training, labelling, evaluation and sweeps, independent of any file layout.

use oran_diffql::agent::{dqn_baseline, train, DiffQlAgent, DqnAgent, LearningCurve};
use oran_diffql::derive_seed;
use oran_diffql::env::{
    apply_action, reward_from, ActionLayout, ActionVector, EnvConfig, MdpState, PowerMode, Step,
};
use oran_diffql::esa::{
    enumerate_optimal, label_instance, Dataset, DatasetHeader, EsaConfig, DATASET_FORMAT,
    DATASET_VERSION,
};
use oran_diffql::metrics::{compare, ComparisonMetrics, RunOutput};
use oran_diffql::model::{constraints_with_metrics, evaluate, ExternalInterferer, NetworkConfig, Point, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ExperimentConfig, Method};
use crate::CliError;

pub const CHECKPOINT_KIND: &str = "oran-diffql-agent";

/// A trained or trivial allocation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Diffql(Box<DiffQlAgent>),
    Dqn(Box<DqnAgent>),
    /// Uniform actions in `[-1, 1]^d`.
    Random,
}

impl Policy {
    pub fn method(&self) -> Method {
        match self {
            Policy::Diffql(_) => Method::Diffql,
            Policy::Dqn(_) => Method::Dqn,
            Policy::Random => Method::Random,
        }
    }

    /// Evaluation action. `candidates` only matters for the diffusion policy.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        layout: &ActionLayout,
        candidates: usize,
        rng: &mut R,
    ) -> Result<ActionVector, CliError> {
        Ok(match self {
            Policy::Diffql(agent) => agent.act_greedy_with(state, candidates, rng)?,
            Policy::Dqn(agent) => agent.act_greedy(state),
            Policy::Random => ActionVector::random(layout, rng),
        })
    }

    /// The baseline's catalog encodes powers directly, so it always decodes them.
    fn env_config(&self, env: &EnvConfig) -> EnvConfig {
        match self {
            Policy::Dqn(_) => EnvConfig {
                power_mode: PowerMode::Learned,
                ..env.clone()
            },
            _ => env.clone(),
        }
    }
}

/// What `train` writes to disk and `evaluate` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// The resolved configuration the policy was trained with.
    pub config: ExperimentConfig,
    pub policy: Policy,
}

/// Trains `method` with the configured hyperparameters.
pub fn train_policy(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<(Policy, LearningCurve), CliError> {
    match method {
        Method::Diffql => {
            let out = train(&cfg.network, &cfg.env, &cfg.train, seed)?;
            Ok((Policy::Diffql(Box::new(out.agent)), out.curve))
        }
        Method::Dqn => {
            let out = dqn_baseline(&cfg.network, &cfg.env, &cfg.dqn, seed)?;
            Ok((Policy::Dqn(Box::new(out.agent)), out.curve))
        }
        Method::Random => Ok((Policy::Random, LearningCurve::default())),
        Method::Esa => Err(CliError::Usage("the exhaustive search is not trained".into())),
    }
}

/// Labels `instances` scenarios with the exhaustive search; records keep index order.
pub fn label_dataset(
    network: &NetworkConfig,
    esa: &EsaConfig,
    instances: usize,
    seed: u64,
    config_hash: &str,
) -> Result<Dataset, CliError> {
    let records = (0..instances)
        .into_par_iter()
        .map(|i| label_instance(network, esa, seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config_hash: config_hash.into(),
            seed,
            instances,
            network: network.clone(),
            esa: esa.clone(),
        },
        records,
    })
}

/// Runs `eval.rollout_steps` closed-loop decisions on a fixed channel from the initial
/// state and returns the last one.
pub fn rollout<R: Rng + ?Sized>(
    policy: &Policy,
    network: &NetworkConfig,
    env: &EnvConfig,
    scenario: &Scenario,
    eval: &EvalConfig,
    rng: &mut R,
) -> Result<Step, CliError> {
    let layout = ActionLayout::of(network);
    let env = policy.env_config(env);
    let mut state = MdpState::initial(&layout).to_vec();
    let mut last = None;
    for _ in 0..eval.rollout_steps.max(1) {
        let action = policy.act(&state, &layout, eval.candidates, rng)?;
        let step = apply_action(&action, &scenario.channel, network, &env);
        state = step.state.to_vec();
        last = Some(step);
    }
    Ok(last.expect("at least one step"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub index: usize,
    pub metrics: ComparisonMetrics,
    /// Total rate of the policy's allocation, bit/s.
    pub throughput: f64,
    pub esa_throughput: f64,
    pub reward: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: Vec<InstanceScore>,
    pub aggregate: ComparisonMetrics,
}

/// Scores `policy` on every record of `dataset`. Instance `i` uses sampling
/// seed `derive_seed(eval.policy_seed, i)`.
pub fn evaluate_policy(
    policy: &Policy,
    network: &NetworkConfig,
    env: &EnvConfig,
    dataset: &Dataset,
    eval: &EvalConfig,
) -> Result<EvalReport, CliError> {
    if &dataset.header.network != network {
        return Err(CliError::Runtime(
            "dataset network does not match the checkpoint network".into(),
        ));
    }
    check_policy_shape(policy, network)?;
    let p_max = network.ru_max_power();
    let scored = dataset
        .records
        .par_iter()
        .map(|rec| {
            let scenario = Scenario::draw(network, rec.scenario_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(eval.policy_seed, rec.index as u64));
            let step = rollout(policy, network, env, &scenario, eval, &mut rng)?;
            let metrics = compare(&[(&step.allocation, &rec.allocation)], p_max)?;
            Ok((
                InstanceScore {
                    index: rec.index,
                    metrics,
                    throughput: step.metrics.rate_total,
                    esa_throughput: rec.objective,
                    reward: step.reward,
                    feasible: step.report.problem_feasible(),
                },
                step.allocation,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let pairs: Vec<_> = scored
        .iter()
        .zip(&dataset.records)
        .map(|((_, a), rec)| (a, &rec.allocation))
        .collect();
    let aggregate = compare(&pairs, p_max)?;
    Ok(EvalReport {
        instances: scored.into_iter().map(|(s, _)| s).collect(),
        aggregate,
    })
}

fn check_policy_shape(policy: &Policy, network: &NetworkConfig) -> Result<(), CliError> {
    let expected = ActionLayout::of(network);
    let found = match policy {
        Policy::Diffql(a) => a.layout,
        Policy::Dqn(a) => a.layout,
        Policy::Random => return Ok(()),
    };
    if found != expected {
        return Err(CliError::Runtime(format!(
            "policy was trained for {} UEs, {} RUs, {} PRBs but the network has {}, {}, {}",
            found.num_ues, found.num_rus, found.num_prbs, expected.num_ues, expected.num_rus, expected.num_prbs
        )));
    }
    Ok(())
}

/// The four sweep families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    NumUes,
    RuPower,
    SlicePower,
    InterferencePower,
}

impl SweepVar {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "num_ues" => Ok(Self::NumUes),
            "ru_power" => Ok(Self::RuPower),
            "slice_power" => Ok(Self::SlicePower),
            "interference_power" => Ok(Self::InterferencePower),
            other => Err(CliError::Usage(format!(
                "unknown sweep variable `{other}` (expected num_ues, ru_power, slice_power or interference_power)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NumUes => "num_ues",
            Self::RuPower => "ru_power",
            Self::SlicePower => "slice_power",
            Self::InterferencePower => "interference_power",
        }
    }

    /// The configuration at one sweep point. Powers are in dBm; `slice_power`
    /// caps every slice at the same level.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, CliError> {
        let mut out = cfg.clone();
        match self {
            Self::NumUes => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(CliError::Usage(format!("num_ues point {value} is not a whole number")));
                }
                out.network = cfg.network.with_num_ues(value as usize);
            }
            Self::RuPower => out.network.ru_max_power_dbm = value,
            Self::SlicePower => {
                for s in &mut out.network.slices {
                    s.power_cap_dbm = Some(value);
                }
            }
            Self::InterferencePower => {
                let [x, y] = cfg.sweep.interferer_position;
                let position = cfg
                    .network
                    .external_interferer
                    .as_ref()
                    .map_or(Point::new(x, y), |e| e.position);
                out.network.external_interferer = Some(ExternalInterferer {
                    power_dbm: value,
                    position,
                });
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Throughput, reward and violation rate of `method` on `instances` draws.
/// Scenario seeds depend on `seed` so every seed sees its own instances.
pub fn score_run(
    cfg: &ExperimentConfig,
    method: Method,
    policy: Option<&Policy>,
    sweep_value: f64,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let network = &cfg.network;
    let n = cfg.sweep.instances.max(1);
    let slices = network.num_slices();
    let (mut total, mut slice, mut reward, mut violations) = (0.0, vec![0.0; slices], 0.0, 0usize);
    for i in 0..n {
        let scenario = Scenario::draw(network, derive_seed(derive_seed(seed, 5), i as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.eval.policy_seed, i as u64));
        let step = match (method, policy) {
            (Method::Esa, _) => {
                let sol = enumerate_optimal(network, &scenario.channel, &cfg.esa)?;
                let metrics = evaluate(&sol.allocation, &scenario.channel, network);
                let report = constraints_with_metrics(&sol.allocation, &metrics, network);
                Step {
                    state: MdpState::initial(&ActionLayout::of(network)),
                    reward: reward_from(&metrics, &report, network, &cfg.env),
                    allocation: sol.allocation,
                    metrics,
                    report,
                    done: false,
                }
            }
            (_, Some(p)) => rollout(p, network, &cfg.env, &scenario, &cfg.eval, &mut rng)?,
            (_, None) => rollout(&Policy::Random, network, &cfg.env, &scenario, &cfg.eval, &mut rng)?,
        };
        total += step.metrics.rate_total;
        for (acc, r) in slice.iter_mut().zip(&step.metrics.rate_slice) {
            *acc += r;
        }
        reward += step.reward;
        violations += usize::from(!step.report.problem_feasible());
    }
    let n = n as f64;
    Ok(RunOutput {
        sweep_value,
        seed,
        total_throughput: total / n,
        slice_throughput: slice.into_iter().map(|s| s / n).collect(),
        mean_reward: reward / n,
        violation_rate: violations as f64 / n,
    })
}

/// One job of a sweep: a point, a method and a seed.
#[derive(Debug, Clone, Copy)]
pub struct SweepJob {
    pub point: usize,
    pub method: Method,
    pub seed: u64,
}

/// Trains (unless `preloaded` supplies the policy) and scores every job.
/// Results come back in job order whatever the worker count.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    var: SweepVar,
    points: &[f64],
    seeds: &[u64],
    preloaded: Option<&Policy>,
) -> Result<Vec<(Method, RunOutput)>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("the sweep needs at least one seed".into()));
    }
    if points.is_empty() {
        return Err(CliError::Usage("the sweep needs at least one point".into()));
    }
    let configs = points
        .iter()
        .map(|&v| var.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut jobs = Vec::new();
    for &method in &cfg.sweep.methods {
        for point in 0..points.len() {
            for &seed in seeds {
                jobs.push(SweepJob { point, method, seed });
            }
        }
    }
    jobs.par_iter()
        .map(|job| {
            let point_cfg = &configs[job.point];
            let value = points[job.point];
            let run = match job.method {
                Method::Esa => score_run(point_cfg, Method::Esa, None, value, job.seed)?,
                Method::Random => score_run(point_cfg, Method::Random, None, value, job.seed)?,
                m => match preloaded.filter(|p| p.method() == m) {
                    Some(p) => {
                        check_policy_shape(p, &point_cfg.network)?;
                        score_run(point_cfg, m, Some(p), value, job.seed)?
                    }
                    None => {
                        let (p, _) = train_policy(point_cfg, m, job.seed)?;
                        score_run(point_cfg, m, Some(&p), value, job.seed)?
                    }
                },
            };
            Ok((job.method, run))
        })
        .collect()
}
