//! The four roles of the training loop. Each owns its parameters (if any)
//! and exposes the operations the pipeline sequences.

mod actor;
mod critic;
mod reference;

pub use actor::{run_episodes, Actor, ActorStats, LogprobSource, RolloutPrompt};
pub use critic::{Critic, CriticStats};
pub use reference::{Reference, RefreshPolicy};

use std::collections::BTreeMap;

use crate::algo::Registry;
use crate::env::TaskInstance;
use crate::error::{Error, Result};
use crate::proto::{
    field, flatten_state, FlatState, PlaceholderPolicy, Trajectory, TrajectoryBatch,
};
use crate::reward::{score, score_batch, RewardConfig};

/// Flattened input of every batch row.
pub fn batch_inputs(batch: &TrajectoryBatch, policy: &PlaceholderPolicy) -> Result<Vec<FlatState>> {
    batch
        .states
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let flat = flatten_state(s, policy)?;
            if flat.tokens.len() != batch.row_len(r) {
                return Err(Error::Protocol(format!(
                    "row {r} state flattens to {} positions, batch holds {}",
                    flat.tokens.len(),
                    batch.row_len(r)
                )));
            }
            Ok(flat)
        })
        .collect()
}

/// Scatters per-row vectors into a flat `rows x width` field.
pub(crate) fn to_field(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len() * width];
    for (r, row) in rows.iter().enumerate() {
        out[r * width..r * width + row.len()].copy_from_slice(row);
    }
    out
}

/// Stateless scoring stage.
pub struct RewardRole {
    pub cfg: RewardConfig,
    pub registry: Registry,
}

impl RewardRole {
    pub fn new(cfg: RewardConfig, registry: Registry) -> Result<Self> {
        cfg.validate(&registry)?;
        Ok(Self { cfg, registry })
    }

    /// Fills `total_reward` and `reward_components` of every trajectory.
    pub fn score_all(
        &self,
        trajectories: &mut [Trajectory],
        instances: &[&TaskInstance],
    ) -> Result<()> {
        if trajectories.len() != instances.len() {
            return Err(Error::Protocol(
                "trajectory and instance counts differ".into(),
            ));
        }
        for (t, inst) in trajectories.iter_mut().zip(instances) {
            let (total, parts) = score(t, inst, &self.cfg, &self.registry)?;
            t.total_reward = total;
            t.reward_components = parts;
        }
        Ok(())
    }

    /// Writes the dense `rewards` field of a batch.
    pub fn score_batch(
        &self,
        batch: &mut TrajectoryBatch,
        instances: &[&TaskInstance],
    ) -> Result<()> {
        score_batch(batch, instances, &self.cfg, &self.registry)
    }

    /// Per-component means over a batch.
    pub fn component_means(batch: &TrajectoryBatch) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for parts in &batch.reward_components {
            for (k, v) in parts {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = batch.rows().max(1) as f64;
        sums.into_iter().map(|(k, v)| (k, v / n)).collect()
    }

    pub fn mean_reward(batch: &TrajectoryBatch) -> Result<f64> {
        let totals = batch.row_values(field::TOTAL_REWARD)?;
        Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
    }
}
