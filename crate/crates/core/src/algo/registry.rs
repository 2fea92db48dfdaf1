use std::collections::BTreeMap;
use std::sync::Arc;

use super::advantage::{builtin_estimators, AdvantageOutput};
use super::aggregate::AggMode;
use super::loss::{builtin_losses, LossInput, LossOutput};
use super::AlgoConfig;
use crate::error::{Error, Result};
use crate::proto::TrajectoryBatch;
use crate::reward::{builtin_rewards, RewardFn};

pub type AdvantageFn =
    Arc<dyn Fn(&TrajectoryBatch, &AlgoConfig) -> Result<AdvantageOutput> + Send + Sync>;
pub type PolicyLossFn = Arc<dyn Fn(&LossInput<'_>) -> Result<LossOutput> + Send + Sync>;

#[derive(Clone)]
pub struct EstimatorEntry {
    pub func: AdvantageFn,
    /// Requires critic values in the batch.
    pub needs_values: bool,
    /// Requires a greedy rollout per prompt.
    pub needs_greedy: bool,
}

#[derive(Clone)]
pub struct PolicyLossEntry {
    pub func: PolicyLossFn,
    pub forced_agg: Option<AggMode>,
}

/// Name-to-implementation tables for estimators, policy losses and reward
/// functions. Populate before a run starts; lookups are exact-match.
#[derive(Clone, Default)]
pub struct Registry {
    estimators: BTreeMap<String, EstimatorEntry>,
    losses: BTreeMap<String, PolicyLossEntry>,
    rewards: BTreeMap<String, RewardFn>,
}

fn unknown(kind: &str, name: &str, options: impl Iterator<Item = String>) -> Error {
    let list: Vec<String> = options.collect();
    Error::Config(format!(
        "unknown {kind} `{name}`; available: {}",
        list.join(", ")
    ))
}

fn duplicate(kind: &str, name: &str) -> Error {
    Error::Registration(format!("{kind} `{name}` is already registered"))
}

impl Registry {
    /// A registry holding every built-in estimator, loss and reward.
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        for (name, needs_values, needs_greedy, func) in builtin_estimators() {
            r.register_estimator_entry(
                name,
                EstimatorEntry {
                    func,
                    needs_values,
                    needs_greedy,
                },
            )
            .expect("built-in names are unique");
        }
        for (name, forced_agg, func) in builtin_losses() {
            r.losses
                .insert(name.to_string(), PolicyLossEntry { func, forced_agg });
        }
        for (name, func) in builtin_rewards() {
            r.rewards.insert(name.to_string(), func);
        }
        r
    }

    /// Registers a critic-free, greedy-free estimator.
    pub fn register_adv_estimator(&mut self, name: &str, func: AdvantageFn) -> Result<()> {
        self.register_estimator_entry(
            name,
            EstimatorEntry {
                func,
                needs_values: false,
                needs_greedy: false,
            },
        )
    }

    pub fn register_estimator_entry(&mut self, name: &str, entry: EstimatorEntry) -> Result<()> {
        if self.estimators.contains_key(name) {
            return Err(duplicate("advantage estimator", name));
        }
        self.estimators.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn register_policy_loss(&mut self, name: &str, func: PolicyLossFn) -> Result<()> {
        if self.losses.contains_key(name) {
            return Err(duplicate("policy loss", name));
        }
        self.losses.insert(
            name.to_string(),
            PolicyLossEntry {
                func,
                forced_agg: None,
            },
        );
        Ok(())
    }

    pub fn register_reward_fn(&mut self, name: &str, func: RewardFn) -> Result<()> {
        if self.rewards.contains_key(name) {
            return Err(duplicate("reward function", name));
        }
        self.rewards.insert(name.to_string(), func);
        Ok(())
    }

    pub fn estimator(&self, name: &str) -> Result<&EstimatorEntry> {
        self.estimators
            .get(name)
            .ok_or_else(|| unknown("advantage estimator", name, self.estimators.keys().cloned()))
    }

    pub fn policy_loss(&self, name: &str) -> Result<&PolicyLossEntry> {
        self.losses
            .get(name)
            .ok_or_else(|| unknown("policy loss", name, self.losses.keys().cloned()))
    }

    pub fn reward_fn(&self, name: &str) -> Result<&RewardFn> {
        self.rewards
            .get(name)
            .ok_or_else(|| unknown("reward function", name, self.rewards.keys().cloned()))
    }

    pub fn estimator_names(&self) -> Vec<&str> {
        self.estimators.keys().map(String::as_str).collect()
    }

    pub fn policy_loss_names(&self) -> Vec<&str> {
        self.losses.keys().map(String::as_str).collect()
    }

    pub fn reward_names(&self) -> Vec<&str> {
        self.rewards.keys().map(String::as_str).collect()
    }
}
