//! Advantage estimators. The scalar functions work on plain slices so they
//! can be reused by plugins and checked in isolation; the batch wrappers
//! handle grouping, validation and broadcasting.

use std::sync::Arc;

use super::registry::AdvantageFn;
use super::{AlgoConfig, Registry};
use crate::error::{Error, Result};
use crate::proto::{field, TrajectoryBatch};

/// Token-level advantages (and returns, for critic-based estimators) laid
/// out like every other numeric batch field.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageOutput {
    pub advantages: Vec<f64>,
    pub returns: Option<Vec<f64>>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Group-normalised advantages with the population standard deviation.
pub fn grpo(rewards: &[f64], std_normalize: bool, std_eps: f64) -> Vec<f64> {
    let m = mean(rewards);
    let s = population_std(rewards, m);
    rewards
        .iter()
        .map(|r| {
            if std_normalize {
                (r - m) / (s + std_eps)
            } else {
                r - m
            }
        })
        .collect()
}

/// Leave-one-out baseline.
pub fn rloo(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Grouping(
            "rloo needs at least 2 rows per group".into(),
        ));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|r| r - (total - r) / (k - 1) as f64)
        .collect())
}

/// `sum_i w_i r_i`; shared by the mean baselines so equal weights agree
/// bit for bit.
fn weighted_sum(rewards: &[f64], weights: impl Iterator<Item = f64>) -> f64 {
    rewards.iter().zip(weights).map(|(r, w)| w * r).sum()
}

/// Response-length-weighted group baseline.
pub fn opo(rewards: &[f64], lengths: &[usize]) -> Vec<f64> {
    let total: usize = lengths.iter().sum();
    if total == 0 {
        return gpg(rewards);
    }
    let b = weighted_sum(rewards, lengths.iter().map(|&l| l as f64 / total as f64));
    rewards.iter().map(|r| r - b).collect()
}

/// Plain group-mean baseline.
pub fn gpg(rewards: &[f64]) -> Vec<f64> {
    let k = rewards.len();
    let b = weighted_sum(rewards, std::iter::repeat(1.0 / k as f64));
    rewards.iter().map(|r| r - b).collect()
}

/// Batch-wide normalisation.
pub fn reinforce_pp(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    grpo(rewards, true, std_eps)
}

/// Greedy-rollout baseline.
pub fn remax(rewards: &[f64], greedy: &[f64]) -> Vec<f64> {
    rewards.iter().zip(greedy).map(|(r, g)| r - g).collect()
}

/// Generalised advantage estimation over one sequence of steps; the value
/// after the last step is 0. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lam * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Row index sets of consecutive equal group ids.
pub type GroupIndex = Vec<Vec<usize>>;

pub fn groups(group_ids: &[u64]) -> Result<GroupIndex> {
    let mut out: GroupIndex = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (r, &g) in group_ids.iter().enumerate() {
        if r > 0 && group_ids[r - 1] == g {
            out.last_mut().expect("non-empty").push(r);
        } else {
            if !seen.insert(g) {
                return Err(Error::Grouping(format!(
                    "rows of group {g} are not contiguous"
                )));
            }
            out.push(vec![r]);
        }
    }
    Ok(out)
}

/// Scalar reward of each row: the row sum of the dense `rewards` field.
pub fn row_rewards(batch: &TrajectoryBatch) -> Result<Vec<f64>> {
    (0..batch.rows())
        .map(|r| Ok(batch.row(field::REWARDS, r)?.iter().sum()))
        .collect()
}

/// Copies one scalar per row onto that row's response positions.
pub fn broadcast_rows(batch: &TrajectoryBatch, per_row: &[f64]) -> Result<Vec<f64>> {
    let width = batch.max_len();
    let mask = batch.data(field::RESPONSE_MASK)?;
    let mut out = vec![0.0; batch.rows() * width];
    for (r, &a) in per_row.iter().enumerate() {
        for t in 0..width {
            out[r * width + t] = mask[r * width + t] * a;
        }
    }
    Ok(out)
}

/// Wraps a per-group scalar rule (rewards, response lengths, config) into a
/// batch estimator that checks group sizes and broadcasts the result.
pub fn per_group<F>(name: &'static str, rule: F) -> AdvantageFn
where
    F: Fn(&[f64], &[usize], &AlgoConfig) -> Result<Vec<f64>> + Send + Sync + 'static,
{
    Arc::new(move |batch: &TrajectoryBatch, cfg: &AlgoConfig| {
        let rewards = row_rewards(batch)?;
        let mut per_row = vec![0.0; batch.rows()];
        if cfg.group_size == 1 {
            log::warn!("{name} with group_size 1 has no baseline; advantages are zero");
        } else {
            for g in groups(&batch.group_ids)? {
                if g.len() != cfg.group_size {
                    return Err(Error::Grouping(format!(
                        "group {} has {} rows, expected {}",
                        batch.group_ids[g[0]],
                        g.len(),
                        cfg.group_size
                    )));
                }
                let r: Vec<f64> = g.iter().map(|&i| rewards[i]).collect();
                let l: Vec<usize> = g.iter().map(|&i| batch.response_len(i)).collect();
                for (&i, a) in g.iter().zip(rule(&r, &l, cfg)?) {
                    per_row[i] = a;
                }
            }
        }
        Ok(AdvantageOutput {
            advantages: broadcast_rows(batch, &per_row)?,
            returns: None,
        })
    })
}

pub(crate) fn builtin_estimators() -> Vec<(&'static str, bool, bool, AdvantageFn)> {
    let gae_fn: AdvantageFn = Arc::new(|batch: &TrajectoryBatch, cfg: &AlgoConfig| {
        let width = batch.max_len();
        let mask = batch.data(field::RESPONSE_MASK)?;
        let rewards = batch.data(field::REWARDS)?;
        let values = batch.data(field::VALUES)?;
        let mut adv = vec![0.0; batch.rows() * width];
        let mut ret = vec![0.0; batch.rows() * width];
        for r in 0..batch.rows() {
            let pos: Vec<usize> = (0..width).filter(|&t| mask[r * width + t] != 0.0).collect();
            let rw: Vec<f64> = pos.iter().map(|&t| rewards[r * width + t]).collect();
            let vs: Vec<f64> = pos.iter().map(|&t| values[r * width + t]).collect();
            let (a, g) = gae(&rw, &vs, cfg.gamma, cfg.lam);
            for (k, &t) in pos.iter().enumerate() {
                adv[r * width + t] = a[k];
                ret[r * width + t] = g[k];
            }
        }
        Ok(AdvantageOutput {
            advantages: adv,
            returns: Some(ret),
        })
    });
    let reinforce_fn: AdvantageFn = Arc::new(|batch: &TrajectoryBatch, cfg: &AlgoConfig| {
        let rewards = row_rewards(batch)?;
        Ok(AdvantageOutput {
            advantages: broadcast_rows(batch, &reinforce_pp(&rewards, cfg.std_eps))?,
            returns: None,
        })
    });
    let remax_fn: AdvantageFn = Arc::new(|batch: &TrajectoryBatch, _cfg: &AlgoConfig| {
        let rewards = row_rewards(batch)?;
        let greedy = batch.row_values(field::GREEDY_REWARD)?;
        Ok(AdvantageOutput {
            advantages: broadcast_rows(batch, &remax(&rewards, greedy))?,
            returns: None,
        })
    });
    vec![
        (
            "grpo",
            false,
            false,
            per_group("grpo", |r, _, c| Ok(grpo(r, c.std_normalize, c.std_eps))),
        ),
        ("rloo", false, false, per_group("rloo", |r, _, _| rloo(r))),
        (
            "opo",
            false,
            false,
            per_group("opo", |r, l, _| Ok(opo(r, l))),
        ),
        ("gpg", false, false, per_group("gpg", |r, _, _| Ok(gpg(r)))),
        ("reinforce_pp", false, false, reinforce_fn),
        ("remax", false, true, remax_fn),
        ("gae", true, false, gae_fn),
    ]
}

/// Runs the configured estimator and writes `advantages` (and `returns`).
pub fn estimate_advantages(
    batch: &mut TrajectoryBatch,
    cfg: &AlgoConfig,
    registry: &Registry,
) -> Result<()> {
    let entry = registry.estimator(&cfg.adv_estimator)?;
    if !batch.has(field::REWARDS) {
        return Err(Error::MissingField(field::REWARDS.into()));
    }
    if entry.needs_values && !batch.has(field::VALUES) {
        return Err(Error::MissingField(field::VALUES.into()));
    }
    let out = (entry.func)(batch, cfg)?;
    if out.advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric(format!(
            "estimator `{}` produced non-finite advantages",
            cfg.adv_estimator
        )));
    }
    batch.set_field(field::ADVANTAGES, 0.0, out.advantages)?;
    if let Some(ret) = out.returns {
        batch.set_field(field::RETURNS, 0.0, ret)?;
    }
    Ok(())
}
