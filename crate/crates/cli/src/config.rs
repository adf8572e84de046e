//! Experiment configuration: one TOML file with every section optional.
//!
//! A file may name a `preset`; its values form the base that the file's own
//! keys override. Unknown keys are rejected with the offending name.

use std::path::Path;

use oran_diffql::agent::{DqnConfig, TrainConfig};
use oran_diffql::env::EnvConfig;
use oran_diffql::esa::EsaConfig;
use oran_diffql::model::NetworkConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size defaults: 50 PRBs, 46 dBm, 128-wide networks.
    #[default]
    Full,
    /// One RU, four UEs, four PRBs and small networks; trains in about a minute.
    Desk,
}

/// Held-out evaluation against exhaustive-search labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub instances: usize,
    /// Seed of the labelled instance set.
    pub dataset_seed: u64,
    /// Seed of the sampling noise of stochastic policies.
    pub policy_seed: u64,
    /// Closed-loop steps on the fixed channel, starting from the initial state.
    /// The last allocation is the one scored.
    pub rollout_steps: usize,
    /// Diffusion samples drawn per decision; the one the critics rate highest is used.
    pub candidates: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            dataset_seed: 20_240_601,
            policy_seed: 7,
            rollout_steps: 1,
            candidates: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Diffql,
    Dqn,
    Esa,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Diffql => "diffql",
            Method::Dqn => "dqn",
            Method::Esa => "esa",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    /// Instances scored per seed and point.
    pub instances: usize,
    /// Where an interferer is placed when the network has none, in meters from RU 0.
    pub interferer_position: [f64; 2],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Diffql, Method::Esa],
            instances: 20,
            interferer_position: [200.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub network: NetworkConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub dqn: DqnConfig,
    pub esa: EsaConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                preset,
                network: NetworkConfig::default(),
                env: EnvConfig::default(),
                train: TrainConfig::default(),
                dqn: DqnConfig::default(),
                esa: EsaConfig::default(),
                eval: EvalConfig::default(),
                sweep: SweepConfig::default(),
            },
            Preset::Desk => Self {
                preset,
                network: NetworkConfig::desk(),
                env: EnvConfig {
                    episode_len: 10,
                    ..EnvConfig::default()
                },
                train: TrainConfig {
                    episodes: 300,
                    batch_size: 32,
                    warmup: 200,
                    hidden: vec![64, 64, 64],
                    lr_critic: 1e-3,
                    lr_policy: 3e-3,
                    lambda0: 10.0,
                    ..TrainConfig::default()
                },
                dqn: DqnConfig {
                    episodes: 300,
                    batch_size: 32,
                    warmup: 200,
                    hidden: vec![64, 64, 64],
                    lr: 1e-3,
                    epsilon_decay_steps: 1500,
                    ..DqnConfig::default()
                },
                esa: EsaConfig::default(),
                eval: EvalConfig::default(),
                sweep: SweepConfig::default(),
            },
        }
    }

    /// Parses TOML text, applying the named preset under the file's keys.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        // a strict parse first, so errors point at the file's own keys
        let own: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let overrides = serde_json::to_value(&table).map_err(|e| CliError::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(Self::preset(own.preset)).expect("config serializes");
        merge(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.network.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.dqn.validate().map_err(|e| cfg(e.to_string()))?;
        if self.esa.power_levels == 0 {
            return Err(cfg("esa.power_levels: must be at least 1".into()));
        }
        if self.env.episode_len == 0 {
            return Err(cfg("env.episode_len: must be at least 1".into()));
        }
        if self.env.power_levels == 0 {
            return Err(cfg("env.power_levels: must be at least 1".into()));
        }
        if self.eval.rollout_steps == 0 {
            return Err(cfg("eval.rollout_steps: must be at least 1".into()));
        }
        if self.eval.candidates == 0 {
            return Err(cfg("eval.candidates: must be at least 1".into()));
        }
        if self.sweep.methods.is_empty() {
            return Err(cfg("sweep.methods: must name at least one method".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The first 16 hex digits, used in CSV columns.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

/// Deep merge of JSON objects; arrays and scalars are replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
