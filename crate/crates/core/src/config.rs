//! Layered run configuration: defaults, then a TOML file, then dotted
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::percept::NoiseMode;
use crate::psnet::{NetConfig, Variant};
use crate::sim::{CommandClass, EnvConfig, RewardWeights};
use crate::terrain::Family;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub envs: usize,
    pub horizon: usize,
    pub updates: usize,
    pub threads: usize,
    pub checkpoint_every: usize,
    pub variant: Variant,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            envs: 64,
            horizon: 32,
            updates: 1000,
            threads: 1,
            checkpoint_every: 50,
            variant: Variant::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f32,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f32,
    /// Multiplies rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            learning_rate: 3e-4,
            entropy_coef: 0.005,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            reward_scale: 0.02,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!(
                "clip {} must be positive",
                self.clip
            )));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::Config(format!(
                "reward_scale {} must be positive",
                self.reward_scale
            )));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config(
                "epochs and minibatches must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub command: CommandClass,
    pub noise: NoiseMode,
    pub camera_z_offset: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            command: CommandClass::Forward,
            noise: NoiseMode::None,
            camera_z_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainSection {
    /// Environment `i` trains on `families[i % len]`.
    pub families: Vec<Family>,
    pub max_level: usize,
    pub seed: u64,
}

impl Default for TerrainSection {
    fn default() -> Self {
        Self {
            families: vec![Family::Flat],
            max_level: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_rollouts: usize,
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_rollouts: 200,
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub ppo: PpoConfig,
    pub net: NetConfig,
    pub env: EnvSection,
    pub reward: RewardWeights,
    pub terrain: TerrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            command: self.env.command,
            noise: self.env.noise,
            camera_z_offset: self.env.camera_z_offset,
            reward: self.reward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        let t = &self.train;
        if t.envs == 0 || t.horizon == 0 {
            return Err(Error::Config(
                "train.envs and train.horizon must be positive".into(),
            ));
        }
        if !t.envs.is_multiple_of(self.ppo.minibatches) {
            return Err(Error::Config(format!(
                "train.envs = {} is not divisible by ppo.minibatches = {}",
                t.envs, self.ppo.minibatches
            )));
        }
        if self.terrain.families.is_empty() {
            return Err(Error::Config("terrain.families is empty".into()));
        }
        if !(0.0..=0.2).contains(&self.env.camera_z_offset) {
            return Err(Error::Config("env.camera_z_offset outside [0, 0.2]".into()));
        }
        Ok(())
    }

    /// Defaults overlaid by `text` (TOML) and then by `overrides`.
    pub fn from_layers(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => {
                toml::from_str::<toml::Table>(t).map_err(|e| Error::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::from_layers(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
