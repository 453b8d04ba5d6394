//! Run configuration: a TOML document with `[env]`, `[model]`, `[train]`,
//! `[eval]` and `[checkpoint]` sections plus a few top-level keys.
//!
//! Unknown keys are rejected everywhere, so a misspelt hyperparameter is an
//! error rather than a silently ignored line. Values can be overridden with
//! dotted `key=value` pairs (`train.lr_actor=1e-3`).

use serde::{Deserialize, Serialize};

use crate::envs::{make_tabular_random, CoordMatrixGame, Environment, SequentialUnlock, Spread, TabularEnv};
use crate::error::{Error, Result};
use crate::model::{ActMode, ModelSpec, Variant};
use crate::training::TrainConfig;
use crate::transformer::Activation;

/// Which environment to train on, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    /// One-shot coordination game.
    Coord { n_agents: usize, actions: usize },
    /// Repeated lock game rewarding correlated randomisation.
    Unlock {
        n_agents: usize,
        #[serde(default = "default_keys")]
        keys: usize,
        #[serde(default = "default_unlock_horizon")]
        horizon: usize,
    },
    /// Grid cover task.
    Spread { n_agents: usize, grid: usize, horizon: usize },
    /// Random tabular Markov game.
    Tabular {
        n_agents: usize,
        states: usize,
        actions: usize,
        gamma: f64,
        game_seed: u64,
        horizon: usize,
    },
}

fn default_keys() -> usize {
    SequentialUnlock::DEFAULT_KEYS
}

fn default_unlock_horizon() -> usize {
    SequentialUnlock::DEFAULT_HORIZON
}

impl EnvConfig {
    pub fn n_agents(&self) -> usize {
        match *self {
            EnvConfig::Coord { n_agents, .. }
            | EnvConfig::Unlock { n_agents, .. }
            | EnvConfig::Spread { n_agents, .. }
            | EnvConfig::Tabular { n_agents, .. } => n_agents,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match *self {
            EnvConfig::Coord { n_agents, actions } => Box::new(CoordMatrixGame::new(n_agents, actions)?),
            EnvConfig::Unlock { n_agents, keys, horizon } => {
                Box::new(SequentialUnlock::with_params(n_agents, keys, horizon)?)
            }
            EnvConfig::Spread { n_agents, grid, horizon } => Box::new(Spread::new(n_agents, grid, horizon)?),
            EnvConfig::Tabular {
                n_agents,
                states,
                actions,
                gamma,
                game_seed,
                horizon,
            } => Box::new(TabularEnv::new(
                make_tabular_random(n_agents, states, actions, gamma, game_seed)?,
                horizon,
            )),
        })
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_agents() == 0 {
            v.push("env.n_agents: must be positive".to_string());
        }
        match *self {
            EnvConfig::Coord { actions, .. } if actions < 2 => v.push("env.actions: need at least 2".into()),
            EnvConfig::Unlock { keys, horizon, .. } => {
                if keys < 2 {
                    v.push("env.keys: need at least 2".into());
                }
                if horizon == 0 {
                    v.push("env.horizon: must be positive".into());
                }
            }
            EnvConfig::Spread { n_agents, grid, horizon } => {
                if grid < 2 || grid * grid < n_agents {
                    v.push("env.grid: need at least 2 and room for one goal per agent".into());
                }
                if horizon == 0 {
                    v.push("env.horizon: must be positive".into());
                }
            }
            EnvConfig::Tabular {
                states,
                actions,
                gamma,
                horizon,
                ..
            } => {
                if states == 0 {
                    v.push("env.states: must be positive".into());
                }
                if actions == 0 {
                    v.push("env.actions: must be positive".into());
                }
                if !(0.0..1.0).contains(&gamma) {
                    v.push("env.gamma: must lie in [0, 1)".into());
                }
                if horizon == 0 {
                    v.push("env.horizon: must be positive".into());
                }
            }
            _ => {}
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 1,
            n_blocks: 1,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Greedy,
    Sample,
}

impl From<EvalMode> for ActMode {
    fn from(m: EvalMode) -> Self {
        match m {
            EvalMode::Greedy => ActMode::Greedy,
            EvalMode::Sample => ActMode::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Iterations between evaluations during training; 0 disables them.
    pub interval: usize,
    pub episodes: usize,
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 0,
            episodes: 10,
            mode: EvalMode::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Iterations between checkpoints (a final one is always written).
    pub interval: usize,
    /// Number of most recent checkpoints kept on disk.
    pub keep: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { interval: 50, keep: 3 }
    }
}

/// Complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
}

fn default_iterations() -> usize {
    300
}

fn default_out_dir() -> String {
    "runs/mat".to_string()
}

impl MatConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(msg) = apply_override(&mut table, o) {
                problems.push(msg);
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let config: MatConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    /// Every violated constraint at once.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.env.violations();
        let m = &self.model;
        if m.d_model == 0 {
            v.push("model.d_model: must be positive".into());
        }
        if m.n_heads == 0 || m.d_model % m.n_heads.max(1) != 0 {
            v.push("model.n_heads: must be positive and divide model.d_model".into());
        }
        if m.n_blocks == 0 {
            v.push("model.n_blocks: must be positive".into());
        }
        v.extend(self.train.violations().into_iter().map(|s| format!("train.{s}")));
        // The trainer accepts a zero rate (a frozen group); a run does not.
        for (name, lr) in [("lr_actor", self.train.lr_actor), ("lr_critic", self.train.lr_critic)] {
            if lr == 0.0 {
                v.push(format!("train.{name}: must be positive"));
            }
        }
        if self.iterations == 0 {
            v.push("iterations: must be positive".into());
        }
        if self.eval.episodes == 0 {
            v.push("eval.episodes: must be positive".into());
        }
        if self.checkpoint.interval == 0 {
            v.push("checkpoint.interval: must be positive".into());
        }
        if self.checkpoint.keep == 0 {
            v.push("checkpoint.keep: must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        self.env.build()
    }

    /// Model architecture matching the configured environment.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let env = self.build_env()?;
        Ok(ModelSpec {
            n_agents: env.n_agents(),
            obs_dim: env.obs_dim(),
            action_space: env.action_space(),
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_blocks: self.model.n_blocks,
            activation: self.model.activation,
            variant: self.variant,
        })
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML value when
/// possible and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> std::result::Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("{assignment}: overrides take the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("{path}: empty key segment"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cursor = table;
    for k in parents {
        cursor = cursor
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("{path}: `{k}` is not a section"))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
