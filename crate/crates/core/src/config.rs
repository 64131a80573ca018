//! Run configuration: one TOML file with a section per component.
//!
//! Keys use the conventional hyperparameter names (`population_size`,
//! `elite_fraction`, `uncertainty_coefficient`, ...).
//! Unknown keys are rejected. Missing keys take their defaults, and for the
//! `[env]` section the defaults are those of the chosen `id`.
//!
//! ```toml
//! seed = 1
//!
//! [env]
//! id = "reach2d"
//!
//! [planner]
//! uncertainty_coefficient = 1.0
//! ```
//!
//! Overrides (`key=value`) address either `section.key` or a bare key that is
//! unique across sections. `lambda`, `tau`, `beta` and `gamma` are accepted
//! as aliases for the uncertainty coefficient, expectile, AWR temperature and
//! discount.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::planner::PlanConfig;
use crate::replay::PerConfig;
use crate::worldmodel::{LossWeights, ModelConfig, OptimConfig};

const ALIASES: &[(&str, &str)] = &[
    ("lambda", "planner.uncertainty_coefficient"),
    ("tau", "loss.expectile"),
    ("beta", "loss.awr_temperature"),
    ("gamma", "loss.discount"),
];

/// Network sizes; state and action dimensions come from the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_state_dimension: usize,
    pub mlp_hidden_size: usize,
    pub hidden_layers: usize,
    pub q_ensemble_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { latent_state_dimension: 50, mlp_hidden_size: 512, hidden_layers: 2, q_ensemble_size: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub per_alpha: f64,
    pub per_beta: f64,
    pub priority_floor: f64,
    /// Online buffer capacity in transitions; the offline buffer never evicts.
    pub online_capacity: usize,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let per = PerConfig::default();
        Self { per_alpha: per.alpha, per_beta: per.beta, priority_floor: per.priority_floor, online_capacity: 50_000 }
    }
}

impl ReplaySection {
    pub fn per(&self) -> PerConfig {
        PerConfig { alpha: self.per_alpha, beta: self.per_beta, priority_floor: self.priority_floor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub online_trials: usize,
    /// Update calls per collected environment step.
    pub updates_per_online_step: usize,
    pub eval_episodes: usize,
    /// Pretrain checkpoint interval in steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Offline dataset, resolved relative to the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            pretrain_steps: 20_000,
            online_trials: 20,
            updates_per_online_step: 1,
            eval_episodes: 20,
            checkpoint_every: 5_000,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub planner: PlanConfig,
    pub replay: ReplaySection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            env: EnvSpec::reach2d(),
            model: ModelSection::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            planner: PlanConfig::default(),
            replay: ReplaySection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        fill_env_defaults(&mut table)?;
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.planner.discount = cfg.loss.discount;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Normalized TOML: every key present, fixed order.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Applies `key=value` overrides in order and re-validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{ov}' is not of the form key=value")))?;
            let path = resolve_key(&table, key.trim())?;
            set_path(&mut table, &path, parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            state_dim: self.env.state_dim(),
            action_dim: self.env.action_dim(),
            latent_dim: self.model.latent_state_dimension,
            hidden_dim: self.model.mlp_hidden_size,
            hidden_layers: self.model.hidden_layers,
            num_q: self.model.q_ensemble_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model_config().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.planner.validate()?;
        let per = self.replay.per();
        if !(per.alpha >= 0.0 && per.beta >= 0.0 && per.priority_floor > 0.0) {
            return Err(Error::config("replay: need per_alpha >= 0, per_beta >= 0, priority_floor > 0"));
        }
        if self.replay.online_capacity < self.env.episode_length {
            return Err(Error::config("replay.online_capacity must hold at least one episode"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.batch_size % 2 != 0 {
            return Err(Error::config(format!("train.batch_size must be positive and even, got {}", t.batch_size)));
        }
        if t.updates_per_online_step == 0 || t.eval_episodes == 0 {
            return Err(Error::config("train.updates_per_online_step and train.eval_episodes must be positive"));
        }
        if self.env.episode_length < self.planner.horizon {
            return Err(Error::config("env.episode_length must be at least planning_horizon"));
        }
        Ok(())
    }
}

fn fill_env_defaults(table: &mut toml::Table) -> Result<()> {
    let Some(env) = table.get_mut("env") else { return Ok(()) };
    let env = env.as_table_mut().ok_or_else(|| Error::config("[env] must be a table"))?;
    let id = match env.get("id") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::config("env.id must be a string"))?
            .parse::<EnvId>()?,
        None => EnvId::Reach2d,
    };
    let defaults = toml::Table::try_from(EnvSpec::for_id(id)).map_err(|e| Error::config(e.to_string()))?;
    for (k, v) in defaults {
        env.entry(k).or_insert(v);
    }
    Ok(())
}

fn resolve_key(table: &toml::Table, key: &str) -> Result<Vec<String>> {
    if let Some((_, full)) = ALIASES.iter().find(|(alias, _)| *alias == key) {
        return Ok(full.split('.').map(String::from).collect());
    }
    if key.contains('.') {
        let path: Vec<String> = key.split('.').map(String::from).collect();
        if lookup(table, &path).is_none() {
            return Err(Error::config(format!("unknown config key '{key}'")));
        }
        return Ok(path);
    }
    let mut hits = Vec::new();
    if table.get(key).is_some_and(|v| !v.is_table()) {
        hits.push(vec![key.to_string()]);
    }
    for (section, v) in table {
        if let Some(sub) = v.as_table() {
            if sub.contains_key(key) {
                hits.push(vec![section.clone(), key.to_string()]);
            }
        }
    }
    match hits.len() {
        1 => Ok(hits.pop().unwrap()),
        0 => Err(Error::config(format!("unknown config key '{key}'"))),
        _ => Err(Error::config(format!(
            "ambiguous config key '{key}', qualify it as one of: {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn lookup<'a>(table: &'a toml::Table, path: &[String]) -> Option<&'a toml::Value> {
    let (last, parents) = path.split_last()?;
    let mut t = table;
    for p in parents {
        t = t.get(p)?.as_table()?;
    }
    t.get(last)
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::config("empty override key"))?;
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{p}' is not a section")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hyperparameter_table() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.planner.population, 512);
        assert_eq!(cfg.planner.elites, 50);
        assert_eq!(cfg.planner.iterations, 6);
        assert_eq!(cfg.planner.horizon, 5);
        assert_eq!(cfg.loss.consistency_coef, 20.0);
        assert_eq!(cfg.loss.reward_coef, 0.5);
        assert_eq!(cfg.loss.value_coef, 0.1);
        assert_eq!(cfg.loss.expectile, 0.9);
        assert_eq!(cfg.optim.learning_rate, 3e-4);
        assert_eq!(cfg.optim.target_update_every, 2);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.model.q_ensemble_size, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[planner]\npopulation = 10\n").unwrap_err();
        assert!(err.to_string().contains("population"), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[replay]\nalpha = 1\n").is_err());
    }

    #[test]
    fn env_defaults_follow_id() {
        let cfg = RunConfig::from_toml_str("[env]\nid = \"push2d\"\n").unwrap();
        assert_eq!(cfg.env, EnvSpec::push2d());
        let cfg = RunConfig::from_toml_str("[env]\nid = \"push2d\"\nepisode_length = 30\n").unwrap();
        assert_eq!(cfg.env.episode_length, 30);
        assert!(RunConfig::from_toml_str("[env]\nid = \"cartpole\"\n").is_err());
    }

    #[test]
    fn canonical_echo_round_trips() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[planner]\nuncertainty_coefficient = 3\n").unwrap();
        let text = cfg.to_canonical_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical_toml(), text);
    }

    #[test]
    fn lambda_override_changes_only_lambda() {
        let base = RunConfig::default();
        let cfg = base.with_overrides(&["lambda=0"]).unwrap();
        assert_eq!(cfg.planner.lambda, 0.0);
        let changed: Vec<_> = base
            .to_canonical_toml()
            .lines()
            .zip(cfg.to_canonical_toml().lines())
            .filter(|(a, b)| a != b)
            .map(|(_, b)| b.to_string())
            .collect();
        assert_eq!(changed, vec!["uncertainty_coefficient = 0.0".to_string()]);
    }

    #[test]
    fn override_key_forms() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.batch_size=64", "population_size=64", "gamma=0.9", "env.id=push2d", "seed=4"])
            .unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.planner.population, 64);
        assert_eq!(cfg.loss.discount, 0.9);
        assert_eq!(cfg.planner.discount, 0.9);
        assert_eq!(cfg.env.id, EnvId::Push2d);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn bad_overrides_name_the_problem() {
        let base = RunConfig::default();
        assert!(base.with_overrides(&["nonsense=1"]).unwrap_err().to_string().contains("nonsense"));
        assert!(base.with_overrides(&["lambda"]).is_err());
        assert!(base.with_overrides(&["lambda=-1"]).is_err());
        assert!(base.with_overrides(&["train.batch_size=7"]).is_err());
        assert!(base.with_overrides(&["discount=0.9"]).is_ok());
    }

    #[test]
    fn validation_is_field_level() {
        let err = RunConfig::from_toml_str("[planner]\nelite_fraction = 1000\n").unwrap_err();
        assert!(err.to_string().contains("elite"), "{err}");
    }
}
