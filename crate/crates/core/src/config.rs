//! Declarative run configuration: YAML file, dotted-path overrides and
//! complete defaults for every group.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::algo::{AlgoConfig, Registry};
use crate::engine::OptimizerConfig;
use crate::env::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::reward::{RewardComponent, RewardConfig};
use crate::roles::RefreshPolicy;

/// Environment variable that replaces `trainer.seed`.
pub const SEED_ENV: &str = "RLFORGE_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub algorithm: AlgoConfig,
    pub actor: ActorConfig,
    pub critic: CriticConfig,
    pub rollout: RolloutConfig,
    pub reward: RewardGroup,
    pub trainer: TrainerConfig,
}

/// Task family and instance sets. Unset grid fields take the family
/// defaults when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub env: EnvKind,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub num_symbols: Option<usize>,
    pub max_turns: Option<usize>,
    pub max_new_tokens: Option<usize>,
    /// JSONL instance file; generated from `train_seed` when unset.
    pub train_file: Option<String>,
    pub eval_file: Option<String>,
    pub train_size: usize,
    pub eval_size: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::GridCount,
            height: None,
            width: None,
            num_symbols: None,
            max_turns: None,
            max_new_tokens: None,
            train_file: None,
            eval_file: None,
            train_size: 1000,
            eval_size: 200,
            train_seed: 0,
            eval_seed: 1,
        }
    }
}

impl DataConfig {
    pub fn env_spec(&self) -> EnvSpec {
        let d = EnvSpec::default_for(self.env);
        EnvSpec {
            kind: self.env,
            height: self.height.unwrap_or(d.height),
            width: self.width.unwrap_or(d.width),
            num_symbols: self.num_symbols.unwrap_or(d.num_symbols),
            max_turns: self.max_turns.unwrap_or(d.max_turns),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub d_model: usize,
    pub d_visual: usize,
    pub optimizer: OptimizerConfig,
    /// Keep a reference policy and report KL to it even when `beta_kl = 0`.
    pub track_ref_kl: bool,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_visual: 16,
            optimizer: OptimizerConfig::default(),
            track_ref_kl: false,
        }
    }
}

/// Used only when the advantage estimator needs state values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub d_model: usize,
    pub d_visual: usize,
    pub optimizer: OptimizerConfig,
    pub value_clip: Option<f64>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_visual: 16,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            value_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub engine: String,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub ngram_block: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            engine: "inprocess".into(),
            temperature: 1.0,
            top_k: None,
            ngram_block: None,
        }
    }
}

/// Reward components as parallel name and weight lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardGroup {
    pub components: Vec<String>,
    pub weights: Vec<f64>,
    pub length_target: Option<usize>,
    pub ngram_n: usize,
}

impl Default for RewardGroup {
    fn default() -> Self {
        let d = RewardConfig::default();
        Self {
            components: d.components.iter().map(|c| c.name.clone()).collect(),
            weights: d.components.iter().map(|c| c.weight).collect(),
            length_target: d.length_target,
            ngram_n: d.ngram_n,
        }
    }
}

impl RewardGroup {
    pub fn to_reward_config(&self) -> Result<RewardConfig> {
        if self.components.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "reward.components has {} entries but reward.weights has {}",
                self.components.len(),
                self.weights.len()
            )));
        }
        Ok(RewardConfig {
            components: self
                .components
                .iter()
                .zip(&self.weights)
                .map(|(name, &weight)| RewardComponent {
                    name: name.clone(),
                    weight,
                })
                .collect(),
            length_target: self.length_target,
            ngram_n: self.ngram_n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub engine: String,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Prompts per step; each contributes `algorithm.group_size` rows.
    pub batch_size: usize,
    pub update_epochs: usize,
    /// Rows per minibatch; the full batch when unset.
    pub minibatch_size: Option<usize>,
    pub ref_refresh: RefreshPolicy,
    /// Checkpoint interval in global steps; the final step is always saved.
    pub checkpoint_every: Option<usize>,
    pub eval_every: Option<usize>,
    /// A `ckpt/step_{n}` directory to continue from.
    pub resume_from: Option<String>,
    /// Write every step's trajectories to `rollouts.jsonl`.
    pub dump_rollouts: bool,
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            engine: "inprocess".into(),
            iterations: 1,
            steps_per_iteration: 100,
            batch_size: 16,
            update_epochs: 1,
            minibatch_size: None,
            ref_refresh: RefreshPolicy::Never,
            checkpoint_every: None,
            eval_every: None,
            resume_from: None,
            dump_rollouts: false,
            log_every: 10,
        }
    }
}

impl TrainerConfig {
    pub fn total_steps(&self) -> usize {
        self.iterations * self.steps_per_iteration
    }
}

impl RunConfig {
    /// Fills family-dependent defaults so the echoed config shows every
    /// effective value.
    pub fn resolve(&mut self) {
        let s = self.data.env_spec();
        self.data.height = Some(s.height);
        self.data.width = Some(s.width);
        self.data.num_symbols = Some(s.num_symbols);
        self.data.max_turns = Some(s.max_turns);
        self.data.max_new_tokens = Some(s.max_new_tokens);
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.data
            .env_spec()
            .validate()
            .or_else(|e| cfg(format!("data: {e}")))?;
        if self.data.train_size == 0 && self.data.train_file.is_none() {
            return cfg("data.train_size must be positive".into());
        }
        self.algorithm.validate(registry)?;
        for (group, d_model, d_visual) in [
            ("actor", self.actor.d_model, self.actor.d_visual),
            ("critic", self.critic.d_model, self.critic.d_visual),
        ] {
            if d_model == 0 || d_visual == 0 {
                return cfg(format!(
                    "{group}.d_model and {group}.d_visual must be positive"
                ));
            }
        }
        self.actor.optimizer.validate()?;
        self.critic.optimizer.validate()?;
        if self.critic.value_clip.is_some_and(|c| c <= 0.0) {
            return cfg("critic.value_clip must be positive".into());
        }
        if !(self.rollout.temperature >= 0.0 && self.rollout.temperature.is_finite()) {
            return cfg("rollout.temperature must be finite and >= 0".into());
        }
        if self.rollout.top_k == Some(0) {
            return cfg("rollout.top_k must be positive".into());
        }
        for name in [&self.rollout.engine] {
            crate::engine::inference_engine(name)?;
        }
        if self.trainer.engine != "inprocess" {
            return cfg(format!(
                "unknown trainer.engine `{}`; available: inprocess",
                self.trainer.engine
            ));
        }
        self.reward.to_reward_config()?.validate(registry)?;
        let t = &self.trainer;
        if t.iterations == 0
            || t.steps_per_iteration == 0
            || t.batch_size == 0
            || t.update_epochs == 0
        {
            return cfg("trainer iterations, steps_per_iteration, batch_size and update_epochs must be positive".into());
        }
        if t.minibatch_size == Some(0) || t.checkpoint_every == Some(0) || t.eval_every == Some(0) {
            return cfg(
                "trainer.minibatch_size, checkpoint_every and eval_every must be positive when set"
                    .into(),
            );
        }
        Ok(())
    }

    /// The resolved config as a YAML tree.
    pub fn to_value(&self) -> Value {
        serde_yaml::to_value(self).expect("config serializes")
    }
}

/// Reads `path` (if given), applies `overrides` in order, then the seed
/// environment variable, and resolves defaults. Validation against a
/// registry is left to the caller so plugins can register first.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = RunConfig::default().to_value();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let user: Value = serde_yaml::from_str(&text)?;
        match user {
            Value::Null => {}
            Value::Mapping(m) => merge(&mut tree, m, "")?,
            _ => {
                return Err(Error::Config(format!(
                    "{} must hold a mapping of groups",
                    path.display()
                )))
            }
        }
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().map_err(|_| {
            Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))
        })?;
        set_path(&mut tree, &["trainer", "seed"], Value::from(seed))?;
    }
    let mut cfg: RunConfig = serde_yaml::from_value(tree)
        .map_err(|e| Error::Config(format!("config type error: {e}")))?;
    cfg.resolve();
    Ok(cfg)
}

/// Applies one `dotted.key=value` override; the value is parsed as YAML.
pub fn apply_override(tree: &mut Value, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value: Value = serde_yaml::from_str(raw)?;
    set_path(tree, &path, value)
}

fn set_path(tree: &mut Value, path: &[&str], value: Value) -> Result<()> {
    let mut node = tree;
    for (i, part) in path.iter().enumerate() {
        let prefix = path[..i].join(".");
        let map = node
            .as_mapping_mut()
            .ok_or_else(|| Error::Config(format!("`{prefix}` is a value, not a group")))?;
        let key = Value::from(*part);
        if !map.contains_key(&key) {
            return Err(unknown_key(map, &prefix, part));
        }
        node = map.get_mut(&key).expect("checked above");
    }
    if node.is_mapping() {
        match value {
            Value::Mapping(m) => return merge(node, m, &path.join(".")),
            _ => {
                return Err(Error::Config(format!(
                    "`{}` is a group and needs a mapping",
                    path.join(".")
                )))
            }
        }
    }
    *node = value;
    Ok(())
}

/// Recursively overlays `user` on the default tree, rejecting keys the
/// defaults do not define.
fn merge(base: &mut Value, user: Mapping, prefix: &str) -> Result<()> {
    let map = base
        .as_mapping_mut()
        .ok_or_else(|| Error::Config(format!("`{prefix}` is a value, not a group")))?;
    for (k, v) in user {
        let name = k
            .as_str()
            .ok_or_else(|| Error::Config(format!("non-string key under `{prefix}`")))?
            .to_string();
        let Some(slot) = map.get_mut(&k) else {
            return Err(unknown_key(map, prefix, &name));
        };
        let path = if prefix.is_empty() {
            name
        } else {
            format!("{prefix}.{name}")
        };
        match (slot.is_mapping(), v) {
            (true, Value::Mapping(m)) => merge(slot, m, &path)?,
            (true, _) => {
                return Err(Error::Config(format!(
                    "`{path}` is a group and needs a mapping"
                )))
            }
            (false, v) => *slot = v,
        }
    }
    Ok(())
}

fn unknown_key(map: &Mapping, prefix: &str, key: &str) -> Error {
    let candidates: Vec<&str> = map.keys().filter_map(Value::as_str).collect();
    let best = candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), *c))
        .min()
        .map(|(_, c)| c);
    let full = if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    };
    match best {
        Some(s) => Error::Config(format!("unknown config key `{full}`; did you mean `{s}`?")),
        None => Error::Config(format!("unknown config key `{full}`")),
    }
}
