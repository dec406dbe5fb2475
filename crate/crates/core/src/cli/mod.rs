//! Experiment front-end: run configuration, multi-seed training, oracle
//! comparison and learning-curve plots.

mod compare;
mod plot;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, PolicyMode};
use crate::envs::{cliff_gridworld, risky_bandit, risky_chain, TabularMdp};
use crate::error::{Error, Result};

pub use compare::{cmd_oracle, OracleComparison, OracleRow};
pub use plot::{cmd_plot, read_stats};
pub use train::{cmd_train, run_single, AgentCheckpoint, RunOutcome, TrainOptions, TrainSummary};

pub const BUILD_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    RiskyBandit,
    RiskyChain {
        #[serde(default = "default_chain_length")]
        length: usize,
    },
    CliffGridworld {
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default = "default_height")]
        height: usize,
        #[serde(default = "default_wind")]
        wind_prob: f64,
    },
}

fn default_chain_length() -> usize {
    10
}
fn default_width() -> usize {
    6
}
fn default_height() -> usize {
    4
}
fn default_wind() -> f64 {
    0.3
}

impl EnvConfig {
    /// Short label used in run ids and plot file names.
    pub fn label(&self) -> &'static str {
        match self {
            EnvConfig::RiskyBandit => "risky_bandit",
            EnvConfig::RiskyChain { .. } => "risky_chain",
            EnvConfig::CliffGridworld { .. } => "cliff_gridworld",
        }
    }

    pub fn build(&self) -> Result<TabularMdp> {
        match *self {
            EnvConfig::RiskyBandit => Ok(risky_bandit()),
            EnvConfig::RiskyChain { length } => risky_chain(length),
            EnvConfig::CliffGridworld {
                width,
                height,
                wind_prob,
            } => cliff_gridworld(width, height, wind_prob),
        }
    }
}

fn default_modes() -> Vec<PolicyMode> {
    vec![PolicyMode::Composite]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_episodes() -> usize {
    500
}

/// Everything needed to reproduce a batch of runs. Parsed from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default = "default_modes")]
    pub policy_modes: Vec<PolicyMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_episodes")]
    pub n_episodes: usize,
    /// Overrides the environment's discount.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub agent: AgentConfig,
}

impl RunConfig {
    pub fn new(env: EnvConfig) -> Self {
        Self {
            env,
            policy_modes: default_modes(),
            seeds: default_seeds(),
            n_episodes: default_episodes(),
            gamma: None,
            output_dir: None,
            agent: AgentConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |key: &str, message: &str| Error::Config {
            key: key.into(),
            message: message.into(),
        };
        if self.policy_modes.is_empty() {
            return Err(config_err("policy_modes", "at least one mode is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(config_err("seeds", "seeds must be distinct"));
        }
        let mut modes = self.policy_modes.clone();
        modes.sort_unstable();
        modes.dedup();
        if modes.len() != self.policy_modes.len() {
            return Err(config_err("policy_modes", "modes must be distinct"));
        }
        if self.n_episodes == 0 {
            return Err(config_err("n_episodes", "must be at least 1"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(config_err("gamma", "must lie in (0, 1)"));
            }
        }
        match self.env {
            EnvConfig::RiskyChain { length } if length < 3 => {
                return Err(config_err("env.length", "must be at least 3"));
            }
            EnvConfig::CliffGridworld {
                width,
                height,
                wind_prob,
            } => {
                if width < 3 || height < 2 {
                    return Err(config_err("env.width", "grid must be at least 3 x 2"));
                }
                if !(0.0..=0.5).contains(&wind_prob) {
                    return Err(config_err("env.wind_prob", "must lie in [0, 0.5]"));
                }
            }
            _ => {}
        }
        self.agent.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("agent.{key}"),
                message,
            },
            other => other,
        })
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        let mut mdp = self.env.build()?;
        if let Some(g) = self.gamma {
            mdp.gamma = g;
        }
        Ok(mdp)
    }

    pub fn run_id(&self, mode: PolicyMode, seed: u64) -> String {
        format!("{}-{}-seed{}", self.env.label(), mode, seed)
    }
}

/// Environment label encoded in a run id.
pub fn env_of_run_id(run_id: &str) -> &str {
    run_id.split('-').next().unwrap_or(run_id)
}

/// Turns a TOML error into a config error naming the key on the offending line.
fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = e
        .span()
        .and_then(|span| {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[start..].lines().next()?;
            let (key, _) = line.split_once('=')?;
            Some(key.trim().to_string())
        })
        .or_else(|| {
            let (_, rest) = message.split_once('`')?;
            Some(rest.split('`').next()?.to_string())
        })
        .unwrap_or_else(|| "<document>".into());
    Error::Config { key, message }
}
