//! Experiment configuration file.
//!
//! TOML with `[sim]`, `[grid]`, `[net]` and `[algo.*]` sections; matrices are
//! nested arrays with one inner array per strike. Every field is optional and
//! missing fields take the default experiment values.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::approximator::{NetTopology, StateEncoding};
use crate::error::{Error, Result};
use crate::market_sim::SimConfig;
use crate::pricing::OptionGrid;
use crate::rl_algos::{ActorCriticConfig, PolicyIterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub residual_blocks: usize,
    /// Inventory normalization in the network input.
    pub q_scale: f64,
    /// Feed S / S0 to the networks.
    pub include_s: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        let topo = NetTopology::default();
        Self { hidden: topo.hidden, residual_blocks: topo.residual_blocks, q_scale: 5.0, include_s: false }
    }
}

impl NetConfig {
    pub fn topology(&self) -> NetTopology {
        NetTopology { hidden: self.hidden.clone(), residual_blocks: self.residual_blocks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub policy_iteration: PolicyIterConfig,
    pub actor_critic: ActorCriticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Rayon worker threads; 0 uses every core.
    pub workers: usize,
    pub sim: SimConfig,
    pub grid: OptionGrid,
    pub net: NetConfig,
    pub algo: AlgoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 0,
            sim: SimConfig::default(),
            grid: OptionGrid::default(),
            net: NetConfig::default(),
            algo: AlgoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn encoding(&self) -> StateEncoding {
        StateEncoding {
            horizon: self.sim.horizon,
            q_scale: self.net.q_scale,
            include_s: self.net.include_s,
            s0: self.sim.s0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.grid.validate(self.sim.horizon)?;
        self.net.topology().validate()?;
        self.encoding().validate()?;
        self.algo.policy_iteration.validate()?;
        self.algo.actor_critic.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let gamma_given = raw.get("sim").and_then(|s| s.get("gamma")).is_some();
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if !gamma_given {
            log::info!("sim.gamma not set; using entropy temperature {} (no published value)", cfg.sim.gamma);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text)
}
