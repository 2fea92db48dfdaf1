//! Rule-based scoring: named reward components combined with weights.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::algo::Registry;
use crate::env::{verify_state, TaskInstance, Verdict};
use crate::error::{Error, Result};
use crate::proto::{field, State, Trajectory, TrajectoryBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardComponent {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub components: Vec<RewardComponent>,
    pub length_target: Option<usize>,
    pub ngram_n: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            components: vec![
                RewardComponent {
                    name: "accuracy".into(),
                    weight: 1.0,
                },
                RewardComponent {
                    name: "format".into(),
                    weight: 0.1,
                },
            ],
            length_target: None,
            ngram_n: 2,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("reward needs at least one component".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.components {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!(
                    "reward component `{}` listed twice",
                    c.name
                )));
            }
            if !c.weight.is_finite() {
                return Err(Error::Config(format!(
                    "reward weight for `{}` is not finite",
                    c.name
                )));
            }
            registry.reward_fn(&c.name)?;
        }
        if self.ngram_n < 2 {
            return Err(Error::Config("reward.ngram_n must be at least 2".into()));
        }
        if self.length_target == Some(0) {
            return Err(Error::Config(
                "reward.length_target must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a reward function may look at.
pub struct RewardContext<'a> {
    pub state: &'a State,
    pub instance: &'a TaskInstance,
    pub verdict: &'a Verdict,
    pub cfg: &'a RewardConfig,
}

pub type RewardFn = Arc<dyn Fn(&RewardContext<'_>) -> f64 + Send + Sync>;

/// `-(repeated windows) / span length`; a window counts as repeated when
/// the same n-gram occurred earlier in the span.
pub fn ngram_penalty(span: &[u32], n: usize) -> f64 {
    if span.len() < n || span.is_empty() {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let repeats = span.windows(n).filter(|w| !seen.insert(*w)).count();
    -(repeats as f64) / span.len() as f64
}

pub fn length_penalty(len: usize, target: Option<usize>) -> f64 {
    match target {
        Some(t) if t > 0 => -(len.saturating_sub(t) as f64) / t as f64,
        _ => 0.0,
    }
}

pub(crate) fn builtin_rewards() -> Vec<(&'static str, RewardFn)> {
    vec![
        (
            "accuracy",
            Arc::new(|c: &RewardContext<'_>| f64::from(u8::from(c.verdict.correct))),
        ),
        (
            "format",
            Arc::new(|c: &RewardContext<'_>| f64::from(u8::from(c.verdict.format_ok))),
        ),
        (
            "length_penalty",
            Arc::new(|c: &RewardContext<'_>| {
                length_penalty(c.state.actor_tokens().len(), c.cfg.length_target)
            }),
        ),
        (
            "ngram_penalty",
            Arc::new(|c: &RewardContext<'_>| ngram_penalty(&c.state.actor_tokens(), c.cfg.ngram_n)),
        ),
    ]
}

/// Scores a finished episode given its final state.
pub fn score_state(
    state: &State,
    instance: &TaskInstance,
    cfg: &RewardConfig,
    registry: &Registry,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let verdict = verify_state(state, instance);
    let ctx = RewardContext {
        state,
        instance,
        verdict: &verdict,
        cfg,
    };
    let mut total = 0.0;
    let mut parts = BTreeMap::new();
    for c in &cfg.components {
        let value = registry.reward_fn(&c.name)?(&ctx);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "reward component `{}` returned {value}",
                c.name
            )));
        }
        total += c.weight * value;
        parts.insert(c.name.clone(), value);
    }
    Ok((total, parts))
}

pub fn score(
    trajectory: &Trajectory,
    instance: &TaskInstance,
    cfg: &RewardConfig,
    registry: &Registry,
) -> Result<(f64, BTreeMap<String, f64>)> {
    score_state(&trajectory.final_state, instance, cfg, registry)
}

/// Scores every row and writes the dense `rewards` field with each row's
/// total on its last response position.
pub fn score_batch(
    batch: &mut TrajectoryBatch,
    instances: &[&TaskInstance],
    cfg: &RewardConfig,
    registry: &Registry,
) -> Result<()> {
    if instances.len() != batch.rows() {
        return Err(Error::Protocol(format!(
            "{} instances for {} batch rows",
            instances.len(),
            batch.rows()
        )));
    }
    let width = batch.max_len();
    let mut dense = vec![0.0; batch.rows() * width];
    let mut totals = Vec::with_capacity(batch.rows());
    for (r, inst) in instances.iter().enumerate() {
        let (total, parts) = score_state(&batch.states[r], inst, cfg, registry)?;
        let last = batch
            .last_response_position(r)
            .ok_or_else(|| Error::Protocol(format!("row {r} has no response tokens")))?;
        dense[r * width + last] = total;
        batch.reward_components[r] = parts;
        totals.push(total);
    }
    batch.set_field(field::REWARDS, 0.0, dense)?;
    batch.set_row_values(field::TOTAL_REWARD, totals)
}
